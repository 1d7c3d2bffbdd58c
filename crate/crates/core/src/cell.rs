//! Cell problems in divergence and non-divergence form and the effective
//! tensor.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{solve_bordered, KrylovOptions, SolveError};
use crate::measure::CoefficientSet;
use crate::torus::{MatrixField, ScalarField, VectorField};

/// Entrywise agreement required between the two effective-tensor formulas.
pub const CROSS_FORMULA_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum CellError {
    #[error("cell problem at this resolution failed: {0}")]
    Solve(#[from] SolveError),
    #[error("cell problem {j} residual {residual:e} exceeds {tol:e}")]
    Residual { j: usize, residual: f64, tol: f64 },
    #[error("cell problem {j} is not solvable: compatibility multiplier {multiplier:e} (drift not centered?)")]
    Incompatible { j: usize, multiplier: f64 },
    #[error("effective tensor formulas disagree by {diff:e} (tolerance {tol:e})")]
    Inconsistent { diff: f64, tol: f64 },
    #[error("effective tensor smallest eigenvalue {found} is below the ellipticity bound {bound}")]
    NotElliptic { found: f64, bound: f64 },
}

#[derive(Debug, Clone)]
pub struct CellSolution {
    pub chi: Vec<ScalarField>,
    pub chi_nondiv: Vec<ScalarField>,
    pub residuals: Vec<f64>,
    pub residuals_nondiv: Vec<f64>,
}

impl CellSolution {
    /// `‖χ̃^j − χ^j‖∞` maximized over `j`.
    pub fn form_mismatch(&self) -> f64 {
        self.chi
            .iter()
            .zip(&self.chi_nondiv)
            .map(|(a, b)| a.max_diff(b).expect("shared grid"))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HomogenizedTensor {
    pub q_bar: Vec<Vec<f64>>,
    pub a_bar: Vec<Vec<f64>>,
    /// Same tensor from the non-divergence correctors and `ã m`.
    pub a_bar_direct: Vec<Vec<f64>>,
    pub cross_formula_diff: f64,
    pub lambda1_check: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct CellOptions {
    /// Residual tolerance relative to the operator symbol scale.
    pub tol: f64,
    pub krylov: KrylovOptions,
}

impl Default for CellOptions {
    fn default() -> Self {
        CellOptions {
            tol: 1e-10,
            krylov: KrylovOptions::default(),
        }
    }
}

fn mean_trace(m: &MatrixField) -> f64 {
    let d = m.dim();
    (0..d).map(|i| m.get(i, i).mean()).sum::<f64>() / d as f64
}

/// `u ↦ −∂_i(q_ik ∂_k u)`.
fn divergence_operator(q: &MatrixField) -> impl Fn(&ScalarField) -> ScalarField + '_ {
    let d = q.dim();
    move |u: &ScalarField| {
        let grad = u.gradient();
        let mut acc = ScalarField::zeros(*u.grid());
        for i in 0..d {
            let mut flux = ScalarField::zeros(*u.grid());
            for k in 0..d {
                flux = flux.add(&q.get(i, k).mul(grad.comp(k)).expect("shared grid")).expect("shared grid");
            }
            acc = acc.sub(&flux.partial_derivative(i)).expect("shared grid");
        }
        acc
    }
}

/// `u ↦ −ã_ik ∂_i∂_k u − b̃_i ∂_i u`.
fn nondivergence_operator(coeffs: &CoefficientSet) -> impl Fn(&ScalarField) -> ScalarField + '_ {
    let d = coeffs.dim();
    move |u: &ScalarField| {
        let grad = u.gradient();
        let mut acc = ScalarField::zeros(*u.grid());
        for i in 0..d {
            let second = grad.comp(i).gradient();
            for k in 0..d {
                acc = acc
                    .sub(&coeffs.a_tilde().get(i, k).mul(second.comp(k)).expect("shared grid"))
                    .expect("shared grid");
            }
            acc = acc
                .sub(&coeffs.b_tilde().comp(i).mul(grad.comp(i)).expect("shared grid"))
                .expect("shared grid");
        }
        acc
    }
}

fn symbol_scale(diffusion: f64, drift: f64, kmax: f64, d: usize) -> f64 {
    d as f64 * diffusion * kmax * kmax + drift * kmax
}

/// Mean-zero `χ^j` with `−∂_i(q_ik(∂_k χ^j + δ_kj)) = 0`; `j` is 0-based.
pub fn solve_cell_divergence(q: &MatrixField, j: usize, opts: &CellOptions) -> Result<(ScalarField, f64), CellError> {
    let d = q.dim();
    let grid = *q.grid();
    // right-hand side ∂_i q_ij
    let mut rhs = ScalarField::zeros(grid);
    for i in 0..d {
        rhs = rhs.add(&q.get(i, j).partial_derivative(i)).expect("shared grid");
    }
    let op = divergence_operator(q);
    let sol = solve_bordered(&op, &rhs, 0.0, mean_trace(q), &opts.krylov)?;
    let scale = symbol_scale(q.max_abs(), 0.0, grid.max_wavenumber(), d) * (1.0 + sol.u.max_abs());
    finish(j, sol.u, sol.residual / scale, sol.multiplier, scale, opts)
}

/// Mean-zero `χ̃^j` with `−ã_ik ∂_i∂_k χ̃^j − b̃_i ∂_i χ̃^j = b̃_j`; `j` is 0-based.
pub fn solve_cell_nondivergence(coeffs: &CoefficientSet, j: usize, opts: &CellOptions) -> Result<(ScalarField, f64), CellError> {
    let grid = *coeffs.grid();
    let op = nondivergence_operator(coeffs);
    let rhs = coeffs.b_tilde().comp(j);
    let kappa = mean_trace(coeffs.a_tilde());
    let sol = solve_bordered(&op, rhs, 0.0, kappa, &opts.krylov)?;
    let scale = symbol_scale(
        coeffs.a_tilde().max_abs(),
        coeffs.b_tilde().max_abs(),
        grid.max_wavenumber(),
        coeffs.dim(),
    ) * (1.0 + sol.u.max_abs());
    finish(j, sol.u, sol.residual / scale, sol.multiplier, scale, opts)
}

fn finish(j: usize, u: ScalarField, residual: f64, multiplier: f64, scale: f64, opts: &CellOptions) -> Result<(ScalarField, f64), CellError> {
    if !(residual <= opts.tol) {
        return Err(CellError::Residual { j, residual, tol: opts.tol });
    }
    if multiplier.abs() > opts.tol.sqrt() * scale {
        return Err(CellError::Incompatible { j, multiplier });
    }
    Ok((u, residual))
}

/// All `2d` cell problems.
pub fn solve_cells(coeffs: &CoefficientSet, q: &MatrixField, opts: &CellOptions) -> Result<CellSolution, CellError> {
    let d = q.dim();
    let mut out = CellSolution {
        chi: Vec::with_capacity(d),
        chi_nondiv: Vec::with_capacity(d),
        residuals: Vec::with_capacity(d),
        residuals_nondiv: Vec::with_capacity(d),
    };
    for j in 0..d {
        let (chi, r) = solve_cell_divergence(q, j, opts)?;
        out.chi.push(chi);
        out.residuals.push(r);
        let (chi, r) = solve_cell_nondivergence(coeffs, j, opts)?;
        out.chi_nondiv.push(chi);
        out.residuals_nondiv.push(r);
    }
    Ok(out)
}

/// `mean[(I + ∇χ) M (I + ∇χ)ᵀ]` with row `i` of `∇χ` the gradient of `χ^i`.
pub fn corrected_average(m: &MatrixField, chi: &[ScalarField], weight: Option<&ScalarField>) -> DMatrix<f64> {
    let d = m.dim();
    let grid = *m.grid();
    // rows e_i + ∇χ^i as fields
    let rows: Vec<VectorField> = chi
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let g = c.gradient();
            let comps = (0..d)
                .map(|k| if k == i { g.comp(k).map(|v| v + 1.0) } else { g.comp(k).clone() })
                .collect();
            VectorField::new(comps).expect("valid layout")
        })
        .collect();
    let ones = ScalarField::constant(grid, 1.0);
    let w = weight.unwrap_or(&ones);
    DMatrix::from_fn(d, d, |i, j| {
        let mut acc = 0.0;
        for k in 0..d {
            for l in 0..d {
                let integrand = rows[i]
                    .comp(k)
                    .mul(m.get(k, l))
                    .and_then(|f| f.mul(rows[j].comp(l)))
                    .and_then(|f| f.mul(w))
                    .expect("shared grid");
                acc += integrand.mean();
            }
        }
        acc
    })
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

/// `q̄`, its symmetrization `ā`, and `ā` recomputed from `(ã, χ̃, m)`.
///
/// The two routes must agree entrywise within [`CROSS_FORMULA_TOL`] and `ā`
/// must dominate `lambda1` up to `1e-10`.
pub fn homogenized_tensor(
    q: &MatrixField,
    coeffs: &CoefficientSet,
    m: &ScalarField,
    cells: &CellSolution,
    lambda1: f64,
) -> Result<HomogenizedTensor, CellError> {
    let q_bar = corrected_average(q, &cells.chi, None);
    let a_bar = (&q_bar + q_bar.transpose()) * 0.5;
    let a_bar_direct = corrected_average(coeffs.a_tilde(), &cells.chi_nondiv, Some(m));
    let diff = (&a_bar - &a_bar_direct).abs().max();
    if !(diff <= CROSS_FORMULA_TOL) {
        return Err(CellError::Inconsistent { diff, tol: CROSS_FORMULA_TOL });
    }
    let found = SymmetricEigen::new(a_bar.clone()).eigenvalues.min();
    if found < lambda1 - 1e-10 {
        return Err(CellError::NotElliptic { found, bound: lambda1 });
    }
    Ok(HomogenizedTensor {
        q_bar: to_rows(&q_bar),
        a_bar: to_rows(&a_bar),
        a_bar_direct: to_rows(&a_bar_direct),
        cross_formula_diff: diff,
        lambda1_check: found,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expression;
    use crate::measure::{invariant_measure_1d_closed_form, solve_invariant_measure, MeasureOptions};
    use crate::torus::TorusGrid;
    use crate::transform::transform;
    use std::f64::consts::PI;

    fn coeffs(a: &[&[&str]], b: &[&str], n: usize) -> CoefficientSet {
        let d = b.len();
        let grid = TorusGrid::cube(d, n).unwrap();
        let p = |s: &str| parse_expression(s, d).unwrap();
        let a: Vec<Vec<_>> = a.iter().map(|row| row.iter().map(|s| p(s)).collect()).collect();
        let b: Vec<_> = b.iter().map(|s| p(s)).collect();
        CoefficientSet::from_expressions(&grid, &a, &b).unwrap()
    }

    fn effective(c: &CoefficientSet) -> (HomogenizedTensor, CellSolution) {
        let m = solve_invariant_measure(c, &MeasureOptions::default()).unwrap();
        let t = transform(c, &m, false).unwrap();
        let cells = solve_cells(c, &t.q, &CellOptions::default()).unwrap();
        let h = homogenized_tensor(&t.q, c, &m.m, &cells, t.lambda1).unwrap();
        (h, cells)
    }

    #[test]
    fn identity() {
        let (h, cells) = effective(&coeffs(&[&["1", "0"], &["0", "1"]], &["0", "0"], 16));
        assert!(cells.chi.iter().all(|c| c.max_abs() < 1e-14));
        for i in 0..2 {
            for j in 0..2 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((h.a_bar[i][j] - e).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn constant_anisotropic_matrix_is_its_own_average() {
        let (h, _) = effective(&coeffs(&[&["2", "0.5"], &["0.5", "1"]], &["0", "0"], 16));
        assert!((h.a_bar[0][0] - 2.0).abs() < 1e-13);
        assert!((h.a_bar[0][1] - 0.5).abs() < 1e-13);
        assert!((h.a_bar[1][1] - 1.0).abs() < 1e-13);
    }

    #[test]
    fn harmonic_mean_in_one_dimension() {
        let (h, cells) = effective(&coeffs(&[&["2+sin(2*pi*y1)"]], &["0"], 128));
        assert!((h.a_bar[0][0] - 3f64.sqrt()).abs() < 1e-10);
        assert!(cells.chi[0].max_abs() < 1e-10);
    }

    #[test]
    fn cosine_drift_one_dimension() {
        // χ̃' = c/m − 1 with c = 1/∫(1/m), ā = c² ∫ 1/m = c
        let c = coeffs(&[&["1"]], &["cos(2*pi*y1)"], 256);
        let (h, cells) = effective(&c);
        let m = invariant_measure_1d_closed_form(&c).unwrap();
        let inv_mean = m.map(|v| 1.0 / v).mean();
        let cc = 1.0 / inv_mean;
        let dchi = cells.chi_nondiv[0].partial_derivative(0);
        assert!(dchi.max_diff(&m.map(|v| cc / v - 1.0)).unwrap() < 1e-10);
        assert!((h.a_bar[0][0] - cc).abs() < 1e-10);
    }

    #[test]
    fn shear_flow() {
        let c = coeffs(&[&["1", "0"], &["0", "1"]], &["0", "cos(2*pi*y1)"], 32);
        let (h, cells) = effective(&c);
        let chi2 = ScalarField::from_fn(*c.grid(), |y| (2.0 * PI * y[0]).cos() / (4.0 * PI * PI));
        assert!(cells.chi[0].max_abs() < 1e-12);
        assert!(cells.chi[1].max_diff(&chi2).unwrap() < 1e-12);
        assert!(cells.chi_nondiv[1].max_diff(&chi2).unwrap() < 1e-12);
        assert!((h.a_bar[0][0] - 1.0).abs() < 1e-12);
        assert!((h.a_bar[1][1] - (1.0 + 1.0 / (8.0 * PI * PI))).abs() < 1e-12);
        assert!(h.a_bar[0][1].abs() < 1e-12);
    }

    #[test]
    fn axis_permutation_equivariance() {
        let a = effective(&coeffs(
            &[&["2+sin(2*pi*y1)", "0.3*sin(2*pi*y1)"], &["0.3*sin(2*pi*y1)", "1+0.5*cos(2*pi*y1)"]],
            &["(2+sin(2*pi*y1))*cos(2*pi*y1)", "(2+sin(2*pi*y1))*exp(-sin(2*pi*y1)/(2*pi))*sin(4*pi*y1)"],
            32,
        ))
        .0;
        let b = effective(&coeffs(
            &[&["1+0.5*cos(2*pi*y2)", "0.3*sin(2*pi*y2)"], &["0.3*sin(2*pi*y2)", "2+sin(2*pi*y2)"]],
            &["(2+sin(2*pi*y2))*exp(-sin(2*pi*y2)/(2*pi))*sin(4*pi*y2)", "(2+sin(2*pi*y2))*cos(2*pi*y2)"],
            32,
        ))
        .0;
        for i in 0..2 {
            for j in 0..2 {
                assert!((a.a_bar[i][j] - b.a_bar[1 - i][1 - j]).abs() < 1e-10);
            }
        }
    }
}
