//! Invariant measure of the periodic diffusion and the centering condition.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{sample_scalar, Expression, SampleError};
use crate::linalg::{solve_bordered, KrylovOptions, SolveError, SolveStats};
use crate::quadrature;
use crate::torus::{FieldError, MatrixField, ScalarField, Symmetry, TorusGrid, VectorField};

/// `|c| ≤ CENTERED_TOL` counts as centered.
pub const CENTERED_TOL: f64 = 1e-8;
/// Above this the drift is non-centered; in between only a warning is issued.
pub const NONCENTERED_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error("resolution too coarse for the invariant measure: {0}")]
    Solve(#[from] SolveError),
    #[error("diffusion matrix is not uniformly elliptic: smallest eigenvalue {min} at node {node}")]
    NotElliptic { min: f64, node: usize },
    #[error("invariant measure lost positivity (min {min:e} at node {node}); the grid under-resolves the coefficients")]
    Positivity { min: f64, node: usize },
    #[error("invariant measure residual {residual:e} exceeds tolerance {tol:e}")]
    Residual { residual: f64, tol: f64 },
    #[error("{0}")]
    Shape(String),
}

/// Diffusion matrix `ã`, drift `b̃` and their certified bounds.
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    a_tilde: MatrixField,
    b_tilde: VectorField,
    lambda: f64,
    big_lambda: f64,
}

impl CoefficientSet {
    pub fn new(a_tilde: MatrixField, b_tilde: VectorField) -> Result<Self, MeasureError> {
        if a_tilde.symmetry() != Symmetry::Symmetric {
            return Err(FieldError::NotSymmetric.into());
        }
        if a_tilde.grid() != b_tilde.grid() {
            return Err(FieldError::GridMismatch.into());
        }
        let (lambda, node) = a_tilde.min_sym_eigenvalue();
        if !(lambda > 0.0) {
            return Err(MeasureError::NotElliptic { min: lambda, node });
        }
        let div_a = a_tilde.column_divergence();
        let big_lambda = a_tilde.max_abs() + div_a.max_abs() + b_tilde.max_abs();
        Ok(CoefficientSet {
            a_tilde,
            b_tilde,
            lambda,
            big_lambda,
        })
    }

    /// Samples `ã` (row-major `d×d`, must be symmetric as given) and `b̃`.
    pub fn from_expressions(
        grid: &TorusGrid,
        a_tilde: &[Vec<Expression>],
        b_tilde: &[Expression],
    ) -> Result<Self, MeasureError> {
        let d = grid.dim();
        if a_tilde.len() != d || a_tilde.iter().any(|row| row.len() != d) || b_tilde.len() != d {
            return Err(MeasureError::Shape(format!(
                "coefficients must be {d}x{d} and length {d}"
            )));
        }
        let mut comps = Vec::with_capacity(d * d);
        for row in a_tilde {
            for e in row {
                comps.push(sample_scalar(e, grid)?);
            }
        }
        let a = MatrixField::new(comps, Symmetry::Symmetric)?;
        let b = VectorField::new(b_tilde.iter().map(|e| sample_scalar(e, grid)).collect::<Result<_, _>>()?)?;
        Self::new(a, b)
    }

    pub fn grid(&self) -> &TorusGrid {
        self.a_tilde.grid()
    }

    pub fn dim(&self) -> usize {
        self.a_tilde.dim()
    }

    pub fn a_tilde(&self) -> &MatrixField {
        &self.a_tilde
    }

    pub fn b_tilde(&self) -> &VectorField {
        &self.b_tilde
    }

    /// Smallest pointwise eigenvalue of `ã` over the grid.
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `‖ã‖∞ + ‖div ã‖∞ + ‖b̃‖∞`.
    pub fn big_lambda(&self) -> f64 {
        self.big_lambda
    }

    /// `(c ã, c b̃)`.
    pub fn scaled(&self, c: f64) -> Result<Self, MeasureError> {
        let s = ScalarField::constant(*self.grid(), c);
        Self::new(self.a_tilde.scale_by(&s)?, self.b_tilde.scale_by(&s)?)
    }

    /// `β̃_i = b̃_i - Σ_j ∂_j ã_ji`, the drift of the divergence-form rewrite.
    pub fn beta_tilde(&self) -> VectorField {
        let div_a = self.a_tilde.column_divergence();
        let comps = (0..self.dim())
            .map(|i| self.b_tilde.comp(i).sub(div_a.comp(i)).expect("shared grid"))
            .collect();
        VectorField::new(comps).expect("valid layout")
    }

    /// Mean diagonal of `ã`, used as the preconditioner diffusivity.
    pub(crate) fn mean_diffusivity(&self) -> f64 {
        let d = self.dim();
        (0..d).map(|i| self.a_tilde.get(i, i).mean()).sum::<f64>() / d as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Centering {
    Centered,
    /// Between the centered and non-centered thresholds; usable with a warning.
    Marginal,
    NonCentered,
}

impl Centering {
    pub fn classify(defect: &[f64]) -> Centering {
        let c = defect.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if c <= CENTERED_TOL {
            Centering::Centered
        } else if c <= NONCENTERED_TOL {
            Centering::Marginal
        } else {
            Centering::NonCentered
        }
    }

    pub fn admits_homogenization(self) -> bool {
        self != Centering::NonCentered
    }
}

#[derive(Debug, Clone)]
pub struct InvariantMeasure {
    pub m: ScalarField,
    /// `‖L* m‖∞` relative to the operator's largest symbol and `‖m‖∞`.
    pub residual: f64,
    pub min_value: f64,
    pub max_value: f64,
    pub centering_defect: Vec<f64>,
    pub centering: Centering,
    pub stats: SolveStats,
}

#[derive(Debug, Clone, Copy)]
pub struct MeasureOptions {
    pub tol: f64,
    pub krylov: KrylovOptions,
}

impl Default for MeasureOptions {
    fn default() -> Self {
        MeasureOptions {
            tol: 1e-10,
            krylov: KrylovOptions::default(),
        }
    }
}

/// `L* m = -∂_i(ã_ij ∂_j m - β̃_i m)`.
pub fn adjoint_operator(coeffs: &CoefficientSet) -> impl Fn(&ScalarField) -> ScalarField + '_ {
    let beta = coeffs.beta_tilde();
    let d = coeffs.dim();
    move |m: &ScalarField| {
        let grad = m.gradient();
        let mut acc = ScalarField::zeros(*m.grid());
        for i in 0..d {
            let mut flux = beta.comp(i).mul(m).expect("shared grid").scale(-1.0);
            for j in 0..d {
                flux = flux
                    .add(&coeffs.a_tilde().get(i, j).mul(grad.comp(j)).expect("shared grid"))
                    .expect("shared grid");
            }
            acc = acc.sub(&flux.partial_derivative(i)).expect("shared grid");
        }
        acc
    }
}

/// Largest symbol magnitude of `L*` on the grid, for residual scaling.
fn operator_scale(coeffs: &CoefficientSet) -> f64 {
    let k = coeffs.grid().max_wavenumber();
    let d = coeffs.dim() as f64;
    d * coeffs.a_tilde().max_abs() * k * k + coeffs.beta_tilde().max_abs() * k
}

pub fn solve_invariant_measure(coeffs: &CoefficientSet, opts: &MeasureOptions) -> Result<InvariantMeasure, MeasureError> {
    let op = adjoint_operator(coeffs);
    let zero = ScalarField::zeros(*coeffs.grid());
    let sol = solve_bordered(&op, &zero, 1.0, coeffs.mean_diffusivity(), &opts.krylov)?;
    let m = sol.u;
    let scale = operator_scale(coeffs) * m.max_abs().max(f64::MIN_POSITIVE);
    let residual = sol.residual / scale;
    if !(residual <= opts.tol) {
        return Err(MeasureError::Residual { residual, tol: opts.tol });
    }
    let (min_value, node) = m
        .values()
        .iter()
        .enumerate()
        .fold((f64::INFINITY, 0), |acc, (i, &v)| if v < acc.0 { (v, i) } else { acc });
    if !(min_value > 0.0) {
        return Err(MeasureError::Positivity { min: min_value, node });
    }
    let centering_defect = centering_defect(coeffs, &m);
    Ok(InvariantMeasure {
        max_value: m.max(),
        min_value,
        residual,
        centering: Centering::classify(&centering_defect),
        centering_defect,
        stats: sol.stats,
        m,
    })
}

/// `c_j = ∫ b̃_j m`.
pub fn centering_defect(coeffs: &CoefficientSet, m: &ScalarField) -> Vec<f64> {
    coeffs
        .b_tilde()
        .comps()
        .iter()
        .map(|b| b.mul(m).expect("shared grid").mean())
        .collect()
}

/// Spectral antiderivative of a mean-zero field: `P' = f - mean(f)`, `P(0) = 0`.
fn periodic_antiderivative(f: &ScalarField) -> ScalarField {
    let grid = *f.grid();
    let n = grid.sizes()[0];
    let spec = f.spectrum();
    let out: Vec<Complex64> = spec
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let freq = TorusGrid::frequency(k, n);
            if freq == 0 || k == n / 2 {
                Complex64::new(0.0, 0.0)
            } else {
                c / Complex64::new(0.0, 2.0 * PI * freq as f64)
            }
        })
        .collect();
    let p = ScalarField::from_spectrum(grid, out);
    let p0 = p.values()[0];
    p.map(|v| v - p0)
}

/// `R(y) = ∫_0^y r` for a periodic rate `r`, evaluable anywhere.
struct RateIntegral {
    mean: f64,
    periodic: ScalarField,
}

impl RateIntegral {
    fn new(rate: &ScalarField) -> Self {
        RateIntegral {
            mean: rate.mean(),
            periodic: periodic_antiderivative(rate),
        }
    }

    fn at(&self, y: f64) -> f64 {
        self.mean * y + self.periodic.interpolate(&[y])
    }

    fn at_node(&self, k: usize) -> f64 {
        let n = self.periodic.grid().sizes()[0];
        self.mean * k as f64 / n as f64 + self.periodic.values()[k]
    }
}

const CLOSED_FORM_ORDER: usize = 8;

/// Closed-form invariant measure of a one-dimensional pair `(ã, b̃)`.
///
/// With `m̃ = ã m` and `R = ∫_0^y b̃/ã`, the first integral `m̃' - b̃ m = C₁`
/// gives `m̃ = e^R (C₀ + C₁ ∫_0^y e^{-R})`; periodicity of `m̃` fixes `C₁/C₀`
/// and the unit mass fixes `C₀`. The centered case is `C₁ = 0`.
pub fn invariant_measure_1d_closed_form(coeffs: &CoefficientSet) -> Result<ScalarField, MeasureError> {
    if coeffs.dim() != 1 {
        return Err(MeasureError::Shape("closed form needs d = 1".into()));
    }
    let grid = *coeffs.grid();
    let n = grid.sizes()[0];
    let a = coeffs.a_tilde().get(0, 0);
    let rate = coeffs.b_tilde().comp(0).zip_div(a)?;
    let r = RateIntegral::new(&rate);
    // J(y_k) = ∫_0^{y_k} e^{-R}, accumulated node to node
    let mut j_nodes = vec![0.0; n + 1];
    for k in 0..n {
        let lo = k as f64 / n as f64;
        let hi = (k + 1) as f64 / n as f64;
        j_nodes[k + 1] = j_nodes[k] + quadrature::integrate(|s| (-r.at(s)).exp(), lo, hi, 1, CLOSED_FORM_ORDER);
    }
    let total_rate = r.mean;
    let c1_over_c0 = ((-total_rate).exp() - 1.0) / j_nodes[n];
    let m_unnorm: Vec<f64> = (0..n)
        .map(|k| r.at_node(k).exp() * (1.0 + c1_over_c0 * j_nodes[k]) / a.values()[k])
        .collect();
    let unnorm = ScalarField::from_values(grid, m_unnorm)?;
    let z = unnorm.mean();
    Ok(unnorm.scale(1.0 / z))
}

/// The two laminated centering integrals for coefficients depending on `y₁`
/// only: `∫ b̃₁/ã₁₁` and, for `j ≥ 2`, `∫ (b̃_j/ã₁₁) exp(∫_0^s b̃₁/ã₁₁) ds`.
pub fn laminated_centering_integrals(coeffs: &CoefficientSet) -> Result<Vec<f64>, MeasureError> {
    let grid = *coeffs.grid();
    let n = grid.sizes()[0];
    let line = TorusGrid::new(&[n])?;
    let stride = grid.len() / n;
    let slice = |f: &ScalarField| -> Result<ScalarField, MeasureError> {
        for k in 0..n {
            let row = &f.values()[k * stride..(k + 1) * stride];
            if row.iter().any(|v| (v - row[0]).abs() > 1e-12 * (1.0 + row[0].abs())) {
                return Err(MeasureError::Shape("coefficients are not laminated along y1".into()));
            }
        }
        Ok(ScalarField::from_values(line, (0..n).map(|k| f.values()[k * stride]).collect())?)
    };
    for c in coeffs.a_tilde().comps() {
        slice(c)?;
    }
    let a11 = slice(coeffs.a_tilde().get(0, 0))?;
    let b1 = slice(coeffs.b_tilde().comp(0))?;
    let rate = b1.zip_div(&a11)?;
    let r = RateIntegral::new(&rate);
    let mut out = vec![r.mean];
    for j in 1..coeffs.dim() {
        let bj = slice(coeffs.b_tilde().comp(j))?;
        let g = bj.zip_div(&a11)?;
        let val = quadrature::integrate(|s| g.interpolate(&[s]) * r.at(s).exp(), 0.0, 1.0, n, CLOSED_FORM_ORDER);
        out.push(val);
    }
    Ok(out)
}

impl ScalarField {
    pub(crate) fn zip_div(&self, other: &ScalarField) -> Result<ScalarField, FieldError> {
        let inv = other.map(|v| 1.0 / v);
        self.mul(&inv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expression;

    pub(crate) fn coeffs_1d(a: &str, b: &str, n: usize) -> CoefficientSet {
        let grid = TorusGrid::new(&[n]).unwrap();
        CoefficientSet::from_expressions(
            &grid,
            &[vec![parse_expression(a, 1).unwrap()]],
            &[parse_expression(b, 1).unwrap()],
        )
        .unwrap()
    }

    fn coeffs_2d(a: [[&str; 2]; 2], b: [&str; 2], n: usize) -> CoefficientSet {
        let grid = TorusGrid::new(&[n, n]).unwrap();
        let a: Vec<Vec<Expression>> = a
            .iter()
            .map(|row| row.iter().map(|s| parse_expression(s, 2).unwrap()).collect())
            .collect();
        let b: Vec<Expression> = b.iter().map(|s| parse_expression(s, 2).unwrap()).collect();
        CoefficientSet::from_expressions(&grid, &a, &b).unwrap()
    }

    #[test]
    fn identity_gives_uniform_measure() {
        let c = coeffs_1d("1", "0", 64);
        let m = solve_invariant_measure(&c, &MeasureOptions::default()).unwrap();
        assert!(m.m.max_diff(&ScalarField::constant(*c.grid(), 1.0)).unwrap() < 1e-13);
        assert_eq!(m.centering, Centering::Centered);
    }

    #[test]
    fn constant_drift_is_not_centered() {
        let c = coeffs_1d("1", "1", 64);
        let m = solve_invariant_measure(&c, &MeasureOptions::default()).unwrap();
        assert!((m.centering_defect[0] - 1.0).abs() < 1e-12);
        assert_eq!(m.centering, Centering::NonCentered);
    }

    #[test]
    fn cosine_drift_matches_exponential_profile() {
        let c = coeffs_1d("1", "cos(2*pi*y1)", 256);
        let m = solve_invariant_measure(&c, &MeasureOptions::default()).unwrap();
        let closed = invariant_measure_1d_closed_form(&c).unwrap();
        assert!(m.m.max_diff(&closed).unwrap() < 1e-10);
        assert!(m.centering_defect[0].abs() < 1e-12);
    }

    #[test]
    fn closed_form_harmonic_coefficient() {
        let c = coeffs_1d("2+sin(2*pi*y1)", "0", 128);
        let closed = invariant_measure_1d_closed_form(&c).unwrap();
        let exact = ScalarField::from_fn(*c.grid(), |y| 3f64.sqrt() / (2.0 + (2.0 * PI * y[0]).sin()));
        assert!(closed.max_diff(&exact).unwrap() < 1e-13);
    }

    #[test]
    fn closed_form_general_branch_matches_solver() {
        // not centered: the C₁ branch is active
        let c = coeffs_1d("1.5+0.5*cos(2*pi*y1)", "0.7+sin(2*pi*y1)", 256);
        let closed = invariant_measure_1d_closed_form(&c).unwrap();
        let m = solve_invariant_measure(&c, &MeasureOptions::default()).unwrap();
        assert!(m.m.max_diff(&closed).unwrap() < 1e-9);
        assert_eq!(m.centering, Centering::NonCentered);
    }

    #[test]
    fn centering_defect_of_shear() {
        let c = coeffs_2d([["1", "0"], ["0", "1"]], ["0", "cos(2*pi*y1)"], 16);
        let m = ScalarField::constant(*c.grid(), 1.0);
        let d = centering_defect(&c, &m);
        assert!(d.iter().all(|v| v.abs() < 1e-15));
        let zero = coeffs_2d([["1", "0"], ["0", "1"]], ["0", "0"], 16);
        assert_eq!(centering_defect(&zero, &m), vec![0.0, 0.0]);
    }

    #[test]
    fn classification_thresholds() {
        assert_eq!(Centering::classify(&[1e-9]), Centering::Centered);
        assert_eq!(Centering::classify(&[0.0, 1e-6]), Centering::Marginal);
        assert_eq!(Centering::classify(&[2e-4]), Centering::NonCentered);
    }

    #[test]
    fn non_elliptic_rejected() {
        let grid = TorusGrid::new(&[16]).unwrap();
        let r = CoefficientSet::from_expressions(
            &grid,
            &[vec![parse_expression("sin(2*pi*y1)", 1).unwrap()]],
            &[parse_expression("0", 1).unwrap()],
        );
        assert!(matches!(r, Err(MeasureError::NotElliptic { .. })));
    }

    #[test]
    fn asymmetric_text_rejected() {
        let grid = TorusGrid::new(&[8, 8]).unwrap();
        let p = |s: &str| parse_expression(s, 2).unwrap();
        let r = CoefficientSet::from_expressions(&grid, &[vec![p("1"), p("0.1")], vec![p("0"), p("1")]], &[p("0"), p("0")]);
        assert!(r.is_err());
    }

    #[test]
    fn laminated_integrals() {
        let c = coeffs_2d([["1", "0"], ["0", "1"]], ["cos(2*pi*y1)", "1"], 32);
        let ints = laminated_centering_integrals(&c).unwrap();
        assert!(ints[0].abs() < 1e-14);
        // ∫ exp(sin(2πs)/2π) ds = I₀(1/2π)
        let i0: f64 = quadrature::integrate(|s| ((2.0 * PI * s).sin() / (2.0 * PI)).exp(), 0.0, 1.0, 64, 8);
        assert!((ints[1] - i0).abs() < 1e-12);
        let not_lam = coeffs_2d([["1", "0"], ["0", "1"]], ["cos(2*pi*y2)", "1"], 16);
        assert!(laminated_centering_integrals(&not_lam).is_err());
    }
}
