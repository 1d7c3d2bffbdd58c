//! Linear solvers for the periodic spectral operators.
//!
//! Periodic elliptic problems have a one-dimensional kernel or cokernel. They
//! are solved through the bordered system
//!
//! ```text
//! [ L   1 ] [u]   [r]
//! [ ⟨·⟩ 0 ] [μ] = [s]
//! ```
//!
//! where `⟨·⟩` is the grid mean. The bordered matrix is nonsingular whenever
//! `L` has a one-dimensional kernel not orthogonal to the mean and constants
//! are not in its range, which covers both `L` (kernel = constants) and its
//! adjoint (kernel = the invariant measure). `μ` then measures how far `r` is
//! from the range of `L`.

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex64;
use thiserror::Error;

use crate::torus::{ScalarField, TorusGrid};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("iterative solve stalled after {iterations} iterations at relative residual {residual:e}; grid too coarse or operator ill-conditioned")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("direct solve failed: system is singular to working precision")]
    Singular,
}

#[derive(Debug, Clone, Copy)]
pub struct KrylovOptions {
    pub tol: f64,
    pub restart: usize,
    pub max_iter: usize,
    /// Systems with at most this many unknowns are assembled and factored densely.
    pub direct_limit: usize,
    /// Dense fallback after a failed iterative solve, up to this size.
    pub fallback_limit: usize,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        KrylovOptions {
            tol: 1e-13,
            restart: 80,
            max_iter: 2000,
            direct_limit: 1100,
            fallback_limit: 4200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub relative_residual: f64,
    pub direct: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Restarted GMRES with right preconditioning. Returns the iterate, its stats
/// and whether the tolerance was reached.
pub fn gmres(
    apply: &dyn Fn(&[f64]) -> Vec<f64>,
    precond: &dyn Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    opts: &KrylovOptions,
) -> (Vec<f64>, SolveStats, bool) {
    let n = b.len();
    let mut x = vec![0.0; n];
    let bnorm = norm(b);
    if bnorm == 0.0 {
        let stats = SolveStats {
            iterations: 0,
            relative_residual: 0.0,
            direct: false,
        };
        return (x, stats, true);
    }
    let m = opts.restart.max(1);
    let mut iterations = 0;
    let mut relres;
    loop {
        let ax = apply(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let beta = norm(&r);
        relres = beta / bnorm;
        if relres <= opts.tol || iterations >= opts.max_iter {
            break;
        }
        let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut h = vec![vec![0.0; m]; m + 1];
        let mut cs = vec![0.0; m];
        let mut sn = vec![0.0; m];
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k = 0;
        while k < m && iterations < opts.max_iter {
            let z = precond(&basis[k]);
            let mut w = apply(&z);
            // two passes of modified Gram-Schmidt
            for _ in 0..2 {
                for (i, v) in basis.iter().enumerate() {
                    let c = dot(&w, v);
                    h[i][k] += c;
                    w.iter_mut().zip(v).for_each(|(wi, vi)| *wi -= c * vi);
                }
            }
            let wn = norm(&w);
            h[k + 1][k] = wn;
            for i in 0..k {
                let t = cs[i] * h[i][k] + sn[i] * h[i + 1][k];
                h[i + 1][k] = -sn[i] * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            let denom = h[k][k].hypot(h[k + 1][k]);
            if denom == 0.0 {
                cs[k] = 1.0;
                sn[k] = 0.0;
            } else {
                cs[k] = h[k][k] / denom;
                sn[k] = h[k + 1][k] / denom;
            }
            h[k][k] = denom;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            iterations += 1;
            k += 1;
            let est = g[k].abs() / bnorm;
            if est <= opts.tol * 0.5 || wn == 0.0 {
                break;
            }
            basis.push(w.iter().map(|v| v / wn).collect());
        }
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let s: f64 = (i + 1..k).map(|j| h[i][j] * y[j]).sum();
            y[i] = if h[i][i] == 0.0 { 0.0 } else { (g[i] - s) / h[i][i] };
        }
        let mut comb = vec![0.0; n];
        for (yi, v) in y.iter().zip(&basis) {
            comb.iter_mut().zip(v).for_each(|(c, vi)| *c += yi * vi);
        }
        let dx = precond(&comb);
        x.iter_mut().zip(&dx).for_each(|(xi, di)| *xi += di);
    }
    let stats = SolveStats {
        iterations,
        relative_residual: relres,
        direct: false,
    };
    (x, stats, relres <= opts.tol)
}

/// Assembles the matrix of `apply` column by column and solves by LU.
pub fn dense_solve(apply: &dyn Fn(&[f64]) -> Vec<f64>, b: &[f64]) -> Result<Vec<f64>, SolveError> {
    let n = b.len();
    let mut mat = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = apply(&e);
        for i in 0..n {
            mat[(i, j)] = col[i];
        }
        e[j] = 0.0;
    }
    let lu = mat.lu();
    lu.solve(&DVector::from_column_slice(b))
        .map(|x| x.as_slice().to_vec())
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or(SolveError::Singular)
}

/// Result of a bordered periodic solve.
#[derive(Debug, Clone)]
pub struct BorderedSolution {
    pub u: ScalarField,
    /// Lagrange multiplier on the constant mode.
    pub multiplier: f64,
    /// `max |L u + μ - r|` at the grid nodes.
    pub residual: f64,
    pub stats: SolveStats,
}

/// Solves `L u + μ = rhs`, `mean(u) = mean_value` for a periodic operator `L`.
///
/// `kappa` sets the preconditioner `(-κΔ)^{-1}` on mean-zero functions.
///
/// Spectral first derivatives annihilate Nyquist modes, so a divergence-form
/// operator built from them is singular there. The solve is restricted to
/// the band without Nyquist modes (an identity block stands in for them) and
/// the Nyquist part of `rhs` is dropped.
pub fn solve_bordered(
    op: &dyn Fn(&ScalarField) -> ScalarField,
    rhs: &ScalarField,
    mean_value: f64,
    kappa: f64,
    opts: &KrylovOptions,
) -> Result<BorderedSolution, SolveError> {
    let grid = *rhs.grid();
    let n = grid.len();
    let sigma = kappa * grid.max_wavenumber().powi(2);
    let rhs = &rhs.without_nyquist();
    let apply = |z: &[f64]| -> Vec<f64> {
        let u = ScalarField::from_values(grid, z[..n].to_vec()).expect("length checked");
        let band = u.without_nyquist();
        let lu = op(&band).without_nyquist();
        let mu = z[n];
        let mut out: Vec<f64> = lu
            .values()
            .iter()
            .zip(u.values().iter().zip(band.values()))
            .map(|(v, (full, b))| v + mu + sigma * (full - b))
            .collect();
        out.push(u.mean());
        out
    };
    let precond = |z: &[f64]| -> Vec<f64> {
        let r = ScalarField::from_values(grid, z[..n].to_vec()).expect("length checked");
        let rbar = r.mean();
        let w = inverse_laplacian(&r, kappa);
        let mut out: Vec<f64> = w.values().iter().map(|v| v + z[n]).collect();
        out.push(rbar);
        out
    };
    let mut b = rhs.values().to_vec();
    b.push(mean_value);

    // GMRES sees the operator rows divided by σ so its relative tolerance is
    // not swamped by the size of the highest resolved mode
    let scaled_apply = |z: &[f64]| -> Vec<f64> {
        let mut out = apply(z);
        out[..n].iter_mut().for_each(|v| *v /= sigma);
        out
    };
    let scaled_precond = |z: &[f64]| -> Vec<f64> {
        let mut w = z.to_vec();
        w[..n].iter_mut().for_each(|v| *v *= sigma);
        precond(&w)
    };
    let mut scaled_b = b.clone();
    scaled_b[..n].iter_mut().for_each(|v| *v /= sigma);

    let (z, stats) = if n < opts.direct_limit {
        let z = dense_solve(&apply, &b)?;
        (z, SolveStats { iterations: 0, relative_residual: 0.0, direct: true })
    } else {
        let (z, stats, ok) = gmres(&scaled_apply, &scaled_precond, &scaled_b, opts);
        if ok {
            (z, stats)
        } else if n < opts.fallback_limit {
            let z = dense_solve(&apply, &b)?;
            (z, SolveStats { iterations: stats.iterations, relative_residual: 0.0, direct: true })
        } else {
            return Err(SolveError::NotConverged {
                iterations: stats.iterations,
                residual: stats.relative_residual,
            });
        }
    };
    let az = apply(&z);
    let residual = az[..n]
        .iter()
        .zip(rhs.values())
        .fold(0.0_f64, |m, (a, r)| m.max((a - r).abs()));
    let mut stats = stats;
    let bn = norm(&b);
    if bn > 0.0 {
        let full: Vec<f64> = az.iter().zip(&b).map(|(a, bb)| a - bb).collect();
        stats.relative_residual = norm(&full) / bn;
    }
    Ok(BorderedSolution {
        u: ScalarField::from_values(grid, z[..n].to_vec()).expect("length checked"),
        multiplier: z[n],
        residual,
        stats,
    })
}

/// `(-κΔ)^{-1}` on the mean-zero part; the zero mode maps to zero.
pub fn inverse_laplacian(r: &ScalarField, kappa: f64) -> ScalarField {
    let grid: TorusGrid = *r.grid();
    let spec = r.spectrum();
    let d = grid.dim();
    let out: Vec<Complex64> = spec
        .iter()
        .enumerate()
        .map(|(idx, c)| {
            let k = grid.multi_index(idx);
            let k2: f64 = (0..d)
                .map(|a| {
                    let f = TorusGrid::frequency(k[a], grid.sizes()[a]) as f64;
                    f * f
                })
                .sum();
            if k2 == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                c / (4.0 * std::f64::consts::PI.powi(2) * k2 * kappa)
            }
        })
        .collect();
    ScalarField::from_spectrum(grid, out)
}
