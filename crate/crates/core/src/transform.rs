//! Weighting by the invariant measure, the divergence-free drift, its flux
//! tensor and the drift-free divergence-form matrix `q`.

use thiserror::Error;

use crate::measure::{CoefficientSet, InvariantMeasure};
use crate::torus::{solve_poisson_torus, FieldError, MatrixField, ScalarField, Symmetry, VectorField};

/// Certification tolerance for `mean(β)` and the flux-tensor identities.
pub const FLUX_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(
        "drift is not centered (∫ b̃ m = {defect:?}); the large drift does not homogenize into diffusion"
    )]
    NonCentered { defect: Vec<f64> },
    #[error("weighted drift fails certification: {0}")]
    Certificate(String),
    #[error("q is not elliptic: smallest symmetric eigenvalue {found:e} at node {node}, expected at least {lambda1:e}")]
    NotElliptic { found: f64, node: usize, lambda1: f64 },
}

#[derive(Debug, Clone)]
pub struct BetaReport {
    pub beta: VectorField,
    pub mean: Vec<f64>,
    pub divergence: f64,
}

#[derive(Debug, Clone)]
pub struct FluxTensor {
    pub potentials: Vec<ScalarField>,
    pub phi: MatrixField,
    /// `‖∂_ℓ φ_ℓj − β_j‖∞` over all `j`.
    pub divergence_residual: f64,
    /// `‖Δ(div f)‖∞`, zero when `div f` is constant.
    pub potential_harmonicity: f64,
}

#[derive(Debug, Clone)]
pub struct TransformedCoefficients {
    pub a: MatrixField,
    pub b: VectorField,
    pub beta: VectorField,
    pub f_potentials: Vec<ScalarField>,
    pub phi: MatrixField,
    pub q: MatrixField,
    pub lambda1: f64,
    pub big_lambda1: f64,
    pub divergence_residual: f64,
}

/// `β_j = b̃_j m − Σ_i ∂_i(ã_ij m)`.
///
/// Non-centered coefficients are refused unless `force` is set.
pub fn build_beta(coeffs: &CoefficientSet, measure: &InvariantMeasure, force: bool) -> Result<BetaReport, TransformError> {
    if !measure.centering.admits_homogenization() && !force {
        return Err(TransformError::NonCentered {
            defect: measure.centering_defect.clone(),
        });
    }
    let m = &measure.m;
    let a = coeffs.a_tilde().scale_by(m)?;
    let div_a = a.column_divergence();
    let comps = (0..coeffs.dim())
        .map(|j| coeffs.b_tilde().comp(j).mul(m)?.sub(div_a.comp(j)))
        .collect::<Result<Vec<_>, _>>()?;
    let beta = VectorField::new(comps)?;
    let mean: Vec<f64> = beta.comps().iter().map(ScalarField::mean).collect();
    let divergence = beta.divergence().max_abs();
    if !force {
        let scale = 1.0 + coeffs.big_lambda() * measure.max_value;
        if let Some(bad) = mean.iter().find(|v| v.abs() > FLUX_TOL) {
            return Err(TransformError::Certificate(format!("mean of β is {bad:e}")));
        }
        // divergence of the weighted drift is the adjoint residual
        let div_tol = FLUX_TOL * scale * coeffs.grid().max_wavenumber().powi(2);
        if divergence > div_tol {
            return Err(TransformError::Certificate(format!(
                "‖div β‖∞ = {divergence:e} exceeds {div_tol:e}"
            )));
        }
    }
    Ok(BetaReport { beta, mean, divergence })
}

/// Flux tensor from the Poisson potentials `Δf^j = β_j`: `φ_ij = ∂_i f^j − ∂_j f^i`.
pub fn build_flux_tensor(beta: &VectorField) -> Result<FluxTensor, TransformError> {
    let d = beta.dim();
    let grid = *beta.grid();
    let potentials = beta
        .comps()
        .iter()
        .map(|b| solve_poisson_torus(b, FLUX_TOL))
        .collect::<Result<Vec<_>, _>>()?;
    let grads: Vec<VectorField> = potentials.iter().map(ScalarField::gradient).collect();
    let mut comps = vec![ScalarField::zeros(grid); d * d];
    for i in 0..d {
        for j in i + 1..d {
            let v = grads[j].comp(i).sub(grads[i].comp(j))?;
            comps[j * d + i] = v.scale(-1.0);
            comps[i * d + j] = v;
        }
    }
    let phi = MatrixField::new(comps, Symmetry::Antisymmetric)?;
    let div_phi = phi.column_divergence();
    let mut divergence_residual: f64 = 0.0;
    for j in 0..d {
        divergence_residual = divergence_residual.max(div_phi.comp(j).max_diff(beta.comp(j))?);
    }
    let div_f = VectorField::new(potentials.clone())?.divergence();
    let potential_harmonicity = div_f.laplacian().max_abs();
    Ok(FluxTensor {
        potentials,
        phi,
        divergence_residual,
        potential_harmonicity,
    })
}

/// `q = a + φ` with the ellipticity constants `λ₁ = λ·min m` and
/// `Λ₁ = max_ij ‖φ_ij‖∞ + Λ·max m`.
pub fn build_q(
    a: &MatrixField,
    phi: &MatrixField,
    m: &ScalarField,
    lambda: f64,
    big_lambda: f64,
) -> Result<(MatrixField, f64, f64), TransformError> {
    if a.symmetry() != Symmetry::Symmetric || phi.symmetry() != Symmetry::Antisymmetric {
        return Err(FieldError::Layout("q needs a symmetric a and an antisymmetric φ".into()).into());
    }
    let comps = a
        .comps()
        .iter()
        .zip(phi.comps())
        .map(|(x, y)| x.add(y))
        .collect::<Result<Vec<_>, _>>()?;
    let q = MatrixField::new(comps, Symmetry::General)?;
    let lambda1 = lambda * m.min();
    let big_lambda1 = phi.max_abs() + big_lambda * m.max();
    let (found, node) = q.min_sym_eigenvalue();
    if found < lambda1 * (1.0 - 1e-12) {
        return Err(TransformError::NotElliptic { found, node, lambda1 });
    }
    Ok((q, lambda1, big_lambda1))
}

/// Full transformation `(ã, b̃, m) ↦ (a, b, β, f, φ, q)`.
pub fn transform(coeffs: &CoefficientSet, measure: &InvariantMeasure, force: bool) -> Result<TransformedCoefficients, TransformError> {
    let beta = build_beta(coeffs, measure, force)?;
    let flux = if force {
        // only the mean-zero part of a non-centered drift has a flux tensor
        let centered = beta
            .beta
            .comps()
            .iter()
            .map(|c| c.map(|v| v - c.mean()))
            .collect();
        build_flux_tensor(&VectorField::new(centered)?)?
    } else {
        build_flux_tensor(&beta.beta)?
    };
    if !force {
        if flux.divergence_residual > FLUX_TOL * (1.0 + beta.beta.max_abs()) {
            return Err(TransformError::Certificate(format!(
                "‖∂_ℓφ_ℓj − β_j‖∞ = {:e}",
                flux.divergence_residual
            )));
        }
        if flux.potential_harmonicity > FLUX_TOL * (1.0 + beta.beta.max_abs()) {
            return Err(TransformError::Certificate(format!(
                "div f is not harmonic: ‖Δ div f‖∞ = {:e}",
                flux.potential_harmonicity
            )));
        }
    }
    let a = coeffs.a_tilde().scale_by(&measure.m)?;
    let b = coeffs.b_tilde().scale_by(&measure.m)?;
    let (q, lambda1, big_lambda1) = build_q(&a, &flux.phi, &measure.m, coeffs.lambda(), coeffs.big_lambda())?;
    Ok(TransformedCoefficients {
        a,
        b,
        beta: beta.beta,
        f_potentials: flux.potentials,
        phi: flux.phi,
        q,
        lambda1,
        big_lambda1,
        divergence_residual: flux.divergence_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expression;
    use crate::measure::{solve_invariant_measure, MeasureOptions};
    use crate::torus::TorusGrid;
    use std::f64::consts::PI;

    fn coeffs(a: &[&[&str]], b: &[&str], n: usize) -> CoefficientSet {
        let d = b.len();
        let grid = TorusGrid::cube(d, n).unwrap();
        let p = |s: &str| parse_expression(s, d).unwrap();
        let a: Vec<Vec<_>> = a.iter().map(|row| row.iter().map(|s| p(s)).collect()).collect();
        let b: Vec<_> = b.iter().map(|s| p(s)).collect();
        CoefficientSet::from_expressions(&grid, &a, &b).unwrap()
    }

    fn laminated(n: usize) -> CoefficientSet {
        coeffs(
            &[&["2+sin(2*pi*y1)", "0.3*sin(2*pi*y1)"], &["0.3*sin(2*pi*y1)", "1+0.5*cos(2*pi*y1)"]],
            &["(2+sin(2*pi*y1))*cos(2*pi*y1)", "(2+sin(2*pi*y1))*exp(-sin(2*pi*y1)/(2*pi))*sin(4*pi*y1)"],
            n,
        )
    }

    fn pipeline(c: &CoefficientSet) -> TransformedCoefficients {
        let m = solve_invariant_measure(c, &MeasureOptions::default()).unwrap();
        transform(c, &m, false).unwrap()
    }

    #[test]
    fn identity_is_fixed() {
        let c = coeffs(&[&["1", "0"], &["0", "1"]], &["0", "0"], 16);
        let t = pipeline(&c);
        assert!(t.beta.max_abs() < 1e-12);
        assert!(t.phi.max_abs() < 1e-12);
        assert!((t.lambda1 - 1.0).abs() < 1e-12);
        let id = MatrixField::identity(*c.grid());
        for (x, y) in t.q.comps().iter().zip(id.comps()) {
            assert!(x.max_diff(y).unwrap() < 1e-13);
        }
    }

    #[test]
    fn centered_1d_has_vanishing_beta() {
        let c = coeffs(&[&["1.5+0.5*sin(2*pi*y1)"]], &["cos(2*pi*y1)"], 128);
        let t = pipeline(&c);
        assert!(t.beta.max_abs() < 1e-10);
        assert_eq!(t.phi.max_abs(), 0.0);
        // q = ã m
        let m = solve_invariant_measure(&c, &MeasureOptions::default()).unwrap();
        assert!(t.q.get(0, 0).max_diff(&c.a_tilde().get(0, 0).mul(&m.m).unwrap()).unwrap() < 1e-14);
    }

    #[test]
    fn shear_flux_tensor() {
        let c = coeffs(&[&["1", "0"], &["0", "1"]], &["0", "cos(2*pi*y1)"], 32);
        let t = pipeline(&c);
        let expect_beta = ScalarField::from_fn(*c.grid(), |y| (2.0 * PI * y[0]).cos());
        assert!(t.beta.comp(1).max_diff(&expect_beta).unwrap() < 1e-12);
        let f2 = ScalarField::from_fn(*c.grid(), |y| -(2.0 * PI * y[0]).cos() / (4.0 * PI * PI));
        assert!(t.f_potentials[1].max_diff(&f2).unwrap() < 1e-13);
        let phi12 = ScalarField::from_fn(*c.grid(), |y| (2.0 * PI * y[0]).sin() / (2.0 * PI));
        assert!(t.phi.get(0, 1).max_diff(&phi12).unwrap() < 1e-12);
        let neg: Vec<f64> = t.phi.get(0, 1).values().iter().map(|v| -v).collect();
        assert_eq!(t.phi.get(1, 0).values(), neg.as_slice());
        assert!(t.divergence_residual < 1e-12);
    }

    #[test]
    fn non_centered_refused_unless_forced() {
        let c = coeffs(&[&["1"]], &["1"], 32);
        let m = solve_invariant_measure(&c, &MeasureOptions::default()).unwrap();
        assert!(matches!(transform(&c, &m, false), Err(TransformError::NonCentered { .. })));
        let t = transform(&c, &m, true).unwrap();
        assert!((t.beta.comp(0).mean() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn q_splits_into_a_and_phi() {
        let c = laminated(32);
        let t = pipeline(&c);
        let d = 2;
        for i in 0..d {
            for j in 0..d {
                let qij = t.q.get(i, j).values();
                let qji = t.q.get(j, i).values();
                for node in 0..qij.len() {
                    let aij = t.a.get(i, j).values()[node];
                    assert!(((qij[node] + qji[node]) / 2.0 - aij).abs() <= 4.0 * f64::EPSILON * aij.abs().max(1.0));
                }
            }
        }
        for c in t.phi.comps() {
            assert!(c.mean().abs() < 1e-12);
        }
        assert!(t.lambda1 > 0.0);
    }

    #[test]
    fn unit_measure_with_known_beta() {
        // b̃ = div ã + β₀ with β₀ divergence free keeps m ≡ 1 and β = β₀
        let c = coeffs(
            &[&["2+sin(2*pi*y1)", "0.3*sin(2*pi*y2)"], &["0.3*sin(2*pi*y2)", "1.5"]],
            &["2*pi*cos(2*pi*y1)+0.6*pi*cos(2*pi*y2)+cos(2*pi*y2)", "sin(2*pi*y1)"],
            32,
        );
        let t = pipeline(&c);
        let g = *c.grid();
        let b1 = ScalarField::from_fn(g, |y| (2.0 * PI * y[1]).cos());
        let b2 = ScalarField::from_fn(g, |y| (2.0 * PI * y[0]).sin());
        assert!(t.beta.comp(0).max_diff(&b1).unwrap() < 1e-11);
        assert!(t.beta.comp(1).max_diff(&b2).unwrap() < 1e-11);
        // Δf¹ = cos 2πy₂, Δf² = sin 2πy₁ ⇒ φ₁₂ = ∂₁f² − ∂₂f¹ = −(cos 2πy₁ + sin 2πy₂)/(2π)
        let phi12 = ScalarField::from_fn(g, |y| -((2.0 * PI * y[0]).cos() + (2.0 * PI * y[1]).sin()) / (2.0 * PI));
        assert!(t.phi.get(0, 1).max_diff(&phi12).unwrap() < 1e-11);
    }

    #[test]
    fn drift_term_equals_flux_form() {
        // ∫ β_j ∂_j u ϕ = −∫ φ_ij ∂_j u ∂_i ϕ for periodic smooth u, ϕ
        let c = laminated(64);
        let t = pipeline(&c);
        let g = *c.grid();
        let cases = [(1.0, 2.0, 0.3), (2.0, 1.0, 1.1), (3.0, -1.0, 2.0)];
        for (k1, k2, shift) in cases {
            let u = ScalarField::from_fn(g, |y| (2.0 * PI * (k1 * y[0] + k2 * y[1]) + shift).sin());
            let phi_t = ScalarField::from_fn(g, |y| {
                (-(2.0 * PI * y[0]).cos() - 0.5 * (2.0 * PI * (y[1] + shift)).sin()).exp()
            });
            let du = u.gradient();
            let dphi = phi_t.gradient();
            let mut lhs = 0.0;
            let mut rhs = 0.0;
            for j in 0..2 {
                lhs += t.beta.comp(j).mul(du.comp(j)).unwrap().mul(&phi_t).unwrap().mean();
                for i in 0..2 {
                    rhs -= t.phi.get(i, j).mul(du.comp(j)).unwrap().mul(dphi.comp(i)).unwrap().mean();
                }
            }
            assert!((lhs - rhs).abs() < 1e-8, "{lhs} vs {rhs}");
        }
    }
}
