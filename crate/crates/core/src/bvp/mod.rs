//! Boundary value problems at scale `ε`, their homogenized limits,
//! Dirichlet correctors, error norms and rate fits.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{EvalError, Expression};
use crate::quadrature::PanelRule;
use crate::torus::ScalarField;
use crate::transform::TransformedCoefficients;

pub mod rect2d;

/// Gauss points per panel.
pub const PANEL_ORDER: usize = 6;
/// Panels per ε-cell unless configured otherwise.
pub const DEFAULT_MESH_PER_PERIOD: usize = 64;
/// Largest 1D mesh (in quadrature nodes) a single solve may allocate.
pub const MAX_NODES_1D: usize = 50_000_000;

#[derive(Debug, Error)]
pub enum BvpError {
    #[error("domain endpoints must satisfy x0 < x1, got {0} and {1}")]
    Domain(f64, f64),
    #[error("ε = {0} is outside (0, 1]")]
    Epsilon(f64),
    #[error("ε = {eps} needs {required} quadrature nodes, over the budget of {budget}")]
    Budget { eps: f64, required: usize, budget: usize },
    #[error("source term could not be evaluated at x = {x}: {source}")]
    Source { x: f64, source: EvalError },
    #[error("the 1D solver needs one-dimensional coefficients, got d = {0}")]
    Dimension(usize),
    #[error("solutions live on different meshes")]
    MeshMismatch,
    #[error("rate fit needs at least 4 positive errors, got {0}")]
    TooFewPoints(usize),
    #[error("homogenized coefficient must be positive, got {0}")]
    NotElliptic(f64),
    #[error("{0}")]
    Rect(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain1D {
    pub x0: f64,
    pub x1: f64,
}

impl Domain1D {
    pub fn new(x0: f64, x1: f64) -> Result<Self, BvpError> {
        if !(x0 < x1) || !x0.is_finite() || !x1.is_finite() {
            return Err(BvpError::Domain(x0, x1));
        }
        Ok(Domain1D { x0, x1 })
    }

    pub fn unit() -> Self {
        Domain1D { x0: 0.0, x1: 1.0 }
    }

    pub fn len(&self) -> f64 {
        self.x1 - self.x0
    }
}

/// Right-hand side `f(x)` and Dirichlet data on an interval.
#[derive(Debug, Clone)]
pub struct BvProblem1D {
    pub domain: Domain1D,
    pub source: Expression,
    pub boundary: [f64; 2],
}

impl BvProblem1D {
    fn source_values(&self, nodes: &[f64]) -> Result<Vec<f64>, BvpError> {
        nodes
            .iter()
            .map(|&x| self.source.evaluate(&[x]).map_err(|source| BvpError::Source { x, source }))
            .collect()
    }
}

/// Composite Gauss mesh with panels aligned to the ε-cells.
#[derive(Debug, Clone)]
pub struct GaussMesh {
    pub domain: Domain1D,
    pub eps: f64,
    /// Panel breakpoints, ascending, starting at `x0` and ending at `x1`.
    pub breaks: Vec<f64>,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    /// In-cell position `x/ε mod 1` of every node.
    pub cell_positions: Vec<f64>,
    rule: PanelRule,
}

impl GaussMesh {
    pub fn new(domain: Domain1D, eps: f64, mesh_per_period: usize) -> Result<Self, BvpError> {
        if !(eps > 0.0 && eps <= 1.0) {
            return Err(BvpError::Epsilon(eps));
        }
        let mpp = mesh_per_period.max(1);
        let h = eps / mpp as f64;
        let k_lo = (domain.x0 / h).floor() as i64;
        let k_hi = (domain.x1 / h).ceil() as i64;
        let required = ((k_hi - k_lo).max(1) as usize) * PANEL_ORDER;
        if required > MAX_NODES_1D {
            return Err(BvpError::Budget { eps, required, budget: MAX_NODES_1D });
        }
        // breakpoints k·h strictly inside the domain, snapped to the endpoints
        let mut breaks = vec![domain.x0];
        let mut starts = vec![None];
        for k in k_lo..=k_hi {
            let x = k as f64 * h;
            if x > domain.x0 + 1e-14 * h.max(domain.len()) && x < domain.x1 - 1e-14 * h {
                breaks.push(x);
                starts.push(Some(k));
            }
        }
        breaks.push(domain.x1);
        // a panel starting on the lattice and ending on the next lattice point
        // gets exactly repeatable in-cell positions
        let rule = PanelRule::new(PANEL_ORDER);
        let n = (breaks.len() - 1) * PANEL_ORDER;
        let mut nodes = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        let mut cell_positions = Vec::with_capacity(n);
        for p in 0..breaks.len() - 1 {
            let (lo, hi) = (breaks[p], breaks[p + 1]);
            let lattice_start = match starts[p] {
                Some(k) => Some(k),
                None if ((lo / h).round() * h - lo).abs() <= 1e-14 * h.max(1.0) => Some((lo / h).round() as i64),
                None => None,
            };
            let aligned = lattice_start.filter(|&k| ((k + 1) as f64 * h - hi).abs() <= 1e-12 * h.max(1.0));
            for (t, w) in rule.nodes.iter().zip(&rule.weights) {
                let x = lo + 0.5 * (hi - lo) * (t + 1.0);
                nodes.push(x);
                weights.push(0.5 * (hi - lo) * w);
                let y = match aligned {
                    Some(k) => (k.rem_euclid(mpp as i64) as f64 + 0.5 * (t + 1.0)) / mpp as f64,
                    None => (x / eps).rem_euclid(1.0),
                };
                cell_positions.push(y);
            }
        }
        Ok(GaussMesh {
            domain,
            eps,
            breaks,
            nodes,
            weights,
            cell_positions,
            rule,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn panels(&self) -> usize {
        self.breaks.len() - 1
    }

    /// `∫_{x0}^{x_i} h` at every node, and the total over the domain.
    pub fn cumulative(&self, h: &[f64]) -> (Vec<f64>, f64) {
        let k = PANEL_ORDER;
        let mut out = vec![0.0; h.len()];
        let mut base = 0.0;
        for p in 0..self.panels() {
            let half = 0.5 * (self.breaks[p + 1] - self.breaks[p]);
            let local = &h[p * k..(p + 1) * k];
            for i in 0..k {
                let s: f64 = self.rule.integration[i].iter().zip(local).map(|(a, b)| a * b).sum();
                out[p * k + i] = base + half * s;
            }
            base += half * self.rule.weights.iter().zip(local).map(|(a, b)| a * b).sum::<f64>();
        }
        (out, base)
    }

    /// Samples a periodic cell field at every node, reusing values at
    /// repeated in-cell positions.
    pub fn sample_cell(&self, field: &ScalarField) -> Vec<f64> {
        let mut cache: HashMap<u64, f64> = HashMap::new();
        self.cell_positions
            .iter()
            .map(|&y| *cache.entry(y.to_bits()).or_insert_with(|| field.interpolate(&[y])))
            .collect()
    }

    fn same_as(&self, other: &GaussMesh) -> bool {
        self.nodes == other.nodes
    }
}

/// Values and derivatives at the mesh nodes; boundary values are kept apart.
#[derive(Debug, Clone)]
pub struct DiscreteSolution {
    pub mesh: GaussMesh,
    pub values: Vec<f64>,
    pub derivative: Vec<f64>,
    /// Available for the constant-coefficient homogenized solution.
    pub second_derivative: Option<Vec<f64>>,
    pub boundary: [f64; 2],
}

/// Periodic 1D profiles entering `−(q u')' − (β/ε) u' = f m`.
#[derive(Debug, Clone)]
pub struct Profile1D {
    pub q: ScalarField,
    pub m: ScalarField,
    /// Residual drift, only present for non-centered data.
    pub drift: Option<ScalarField>,
}

impl Profile1D {
    /// Centered data: the whole drift is carried by `q`.
    pub fn centered(tc: &TransformedCoefficients, m: &ScalarField) -> Result<Self, BvpError> {
        if tc.q.dim() != 1 {
            return Err(BvpError::Dimension(tc.q.dim()));
        }
        Ok(Profile1D {
            q: tc.q.get(0, 0).clone(),
            m: m.clone(),
            drift: None,
        })
    }

    /// Non-centered data: a 1×1 flux tensor vanishes, so `β` stays as a drift.
    pub fn with_drift(tc: &TransformedCoefficients, m: &ScalarField) -> Result<Self, BvpError> {
        let mut p = Self::centered(tc, m)?;
        p.drift = Some(tc.beta.comp(0).clone());
        Ok(p)
    }
}

/// Core 1D solve with tabulated coefficients at the mesh nodes.
fn solve_tabulated(
    mesh: &GaussMesh,
    q: &[f64],
    drift_rate: Option<&[f64]>,
    rhs: &[f64],
    boundary: [f64; 2],
) -> (Vec<f64>, Vec<f64>) {
    let n = mesh.len();
    let k = PANEL_ORDER;
    // R' = β/(ε q); v = q u' = C e^{−(R−R*)} − G with G' = rhs − R' G, G(x0) = 0
    let (rr, _) = match drift_rate {
        Some(rate) => mesh.cumulative(rate),
        None => (vec![0.0; n], 0.0),
    };
    let mut g = vec![0.0; n];
    if let Some(rate) = drift_rate {
        let mut g_start = 0.0;
        let mut r_start = 0.0;
        for p in 0..mesh.panels() {
            let half = 0.5 * (mesh.breaks[p + 1] - mesh.breaks[p]);
            let idx = p * k..(p + 1) * k;
            let integrand: Vec<f64> = idx.clone().map(|i| (rr[i] - r_start).exp() * rhs[i]).collect();
            for i in 0..k {
                let s: f64 = mesh.rule.integration[i].iter().zip(&integrand).map(|(a, b)| a * b).sum();
                g[p * k + i] = (r_start - rr[p * k + i]).exp() * (g_start + half * s);
            }
            let total: f64 = mesh.rule.weights.iter().zip(&integrand).map(|(a, b)| a * b).sum();
            // R at the panel end from the rate's panel integral
            let r_end = r_start + half * mesh.rule.weights.iter().zip(&rate[idx]).map(|(a, b)| a * b).sum::<f64>();
            g_start = (r_start - r_end).exp() * (g_start + half * total);
            r_start = r_end;
        }
    } else {
        g = mesh.cumulative(rhs).0;
    }
    let r_min = rr.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0);
    let e: Vec<f64> = rr.iter().map(|r| (-(r - r_min)).exp()).collect();
    let e_over_q: Vec<f64> = e.iter().zip(q).map(|(a, b)| a / b).collect();
    let g_over_q: Vec<f64> = g.iter().zip(q).map(|(a, b)| a / b).collect();
    let (i1, t1) = mesh.cumulative(&e_over_q);
    let (i2, t2) = mesh.cumulative(&g_over_q);
    let c = (boundary[1] - boundary[0] + t2) / t1;
    let values = (0..n).map(|i| boundary[0] + c * i1[i] - i2[i]).collect();
    let derivative = (0..n).map(|i| c * e_over_q[i] - g_over_q[i]).collect();
    (values, derivative)
}

/// `−(q(x/ε) u')' − (β(x/ε)/ε) u' = f(x) m(x/ε)` with Dirichlet data.
pub fn solve_eps_1d(profile: &Profile1D, prob: &BvProblem1D, eps: f64, mesh_per_period: usize) -> Result<DiscreteSolution, BvpError> {
    let mesh = GaussMesh::new(prob.domain, eps, mesh_per_period)?;
    let q = mesh.sample_cell(&profile.q);
    let m = mesh.sample_cell(&profile.m);
    let f = prob.source_values(&mesh.nodes)?;
    let rhs: Vec<f64> = f.iter().zip(&m).map(|(a, b)| a * b).collect();
    let rate = profile.drift.as_ref().map(|b| {
        mesh.sample_cell(b)
            .iter()
            .zip(&q)
            .map(|(bb, qq)| bb / (eps * qq))
            .collect::<Vec<f64>>()
    });
    let (values, derivative) = solve_tabulated(&mesh, &q, rate.as_deref(), &rhs, prob.boundary);
    Ok(DiscreteSolution {
        mesh,
        values,
        derivative,
        second_derivative: None,
        boundary: prob.boundary,
    })
}

/// `−ā u'' = f` with Dirichlet data, on a given mesh.
pub fn solve_homogenized_1d(a_bar: f64, prob: &BvProblem1D, mesh: &GaussMesh) -> Result<DiscreteSolution, BvpError> {
    if !(a_bar > 0.0) {
        return Err(BvpError::NotElliptic(a_bar));
    }
    let q = vec![a_bar; mesh.len()];
    let f = prob.source_values(&mesh.nodes)?;
    let (values, derivative) = solve_tabulated(mesh, &q, None, &f, prob.boundary);
    Ok(DiscreteSolution {
        mesh: mesh.clone(),
        values,
        derivative,
        second_derivative: Some(f.iter().map(|v| -v / a_bar).collect()),
        boundary: prob.boundary,
    })
}

/// `(q(x/ε) Φ')' = 0`, `Φ = x` at both ends.
pub fn dirichlet_corrector_1d(q: &ScalarField, eps: f64, domain: Domain1D, mesh_per_period: usize) -> Result<DiscreteSolution, BvpError> {
    let mesh = GaussMesh::new(domain, eps, mesh_per_period)?;
    let qv = mesh.sample_cell(q);
    let zero = vec![0.0; mesh.len()];
    let boundary = [domain.x0, domain.x1];
    let (values, derivative) = solve_tabulated(&mesh, &qv, None, &zero, boundary);
    Ok(DiscreteSolution {
        mesh,
        values,
        derivative,
        second_derivative: None,
        boundary,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorNorms {
    pub l2: f64,
    pub linf: f64,
    pub h1_raw: f64,
    pub h1_corrected: f64,
}

/// Norms of `u_ε − u` and of `u_ε − u − (Φ − x) u'`, the latter with its
/// derivative `u_ε' − u' − (Φ' − 1) u' − (Φ − x) u''`.
pub fn error_norms(u_eps: &DiscreteSolution, u: &DiscreteSolution, corrector: &DiscreteSolution) -> Result<ErrorNorms, BvpError> {
    if !u_eps.mesh.same_as(&u.mesh) || !u_eps.mesh.same_as(&corrector.mesh) {
        return Err(BvpError::MeshMismatch);
    }
    let w = &u_eps.mesh.weights;
    let x = &u_eps.mesh.nodes;
    let upp = u.second_derivative.clone().unwrap_or_else(|| vec![0.0; x.len()]);
    let (mut l2, mut linf, mut d2, mut c2, mut cd2) = (0.0, 0.0_f64, 0.0, 0.0, 0.0);
    for i in 0..x.len() {
        let e = u_eps.values[i] - u.values[i];
        let de = u_eps.derivative[i] - u.derivative[i];
        let shift = corrector.values[i] - x[i];
        let ce = e - shift * u.derivative[i];
        let cde = de - (corrector.derivative[i] - 1.0) * u.derivative[i] - shift * upp[i];
        l2 += w[i] * e * e;
        linf = linf.max(e.abs());
        d2 += w[i] * de * de;
        c2 += w[i] * ce * ce;
        cd2 += w[i] * cde * cde;
    }
    Ok(ErrorNorms {
        l2: l2.sqrt(),
        linf,
        h1_raw: (l2 + d2).sqrt(),
        h1_corrected: (c2 + cd2).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub max_log_residual: f64,
    /// ε values left out of the fit, with the reason.
    pub excluded: Vec<(f64, String)>,
}

/// Least-squares line through `(log ε, log err)`.
///
/// Exact zeros are dropped with a note. The largest ε is dropped as
/// pre-asymptotic when its log-residual exceeds 0.1 and at least four points
/// remain.
pub fn fit_rate(eps: &[f64], errs: &[f64]) -> Result<RateFit, BvpError> {
    let mut excluded = Vec::new();
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for (&e, &r) in eps.iter().zip(errs) {
        if r > 0.0 && e > 0.0 {
            pts.push((e.ln(), r.ln()));
        } else {
            excluded.push((e, format!("non-positive error {r:e}")));
        }
    }
    if pts.len() < 4 {
        return Err(BvpError::TooFewPoints(pts.len()));
    }
    let mut fit = least_squares(&pts);
    let largest = pts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .0.total_cmp(&b.1 .0))
        .map(|(i, _)| i)
        .expect("non-empty");
    let (lx, ly) = pts[largest];
    let resid = (ly - (fit.1 + fit.0 * lx)).abs();
    if resid > 0.1 && pts.len() > 4 {
        excluded.push((lx.exp(), format!("pre-asymptotic, log-residual {resid:.3}")));
        pts.remove(largest);
        fit = least_squares(&pts);
    }
    let max_log_residual = pts
        .iter()
        .map(|(x, y)| (y - (fit.1 + fit.0 * x)).abs())
        .fold(0.0, f64::max);
    Ok(RateFit {
        slope: fit.0,
        intercept: fit.1,
        max_log_residual,
        excluded,
    })
}

fn least_squares(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// `sup |u'(x) − u'(z)| / |x − z|^{1/2}` over node pairs closer than `window`.
///
/// The oscillation of `u'_ε` lives on the ε scale, so pairs farther apart than
/// a few cells cannot realize the supremum.
pub fn half_holder_seminorm(nodes: &[f64], du: &[f64], window: f64) -> f64 {
    let n = nodes.len();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut best: f64 = 0.0;
            for j in i + 1..n {
                let dx = nodes[j] - nodes[i];
                if dx > window {
                    break;
                }
                if dx > 0.0 {
                    best = best.max((du[j] - du[i]).abs() / dx.sqrt());
                }
            }
            best
        })
        .reduce(|| 0.0, f64::max)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub eps: f64,
    pub norms: ErrorNorms,
    pub lipschitz: f64,
    pub holder_half: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateReport {
    pub rows: Vec<SweepRow>,
    pub a_bar: f64,
    pub l2: Option<RateFit>,
    pub linf: Option<RateFit>,
    pub h1_raw: Option<RateFit>,
    pub h1_corrected: Option<RateFit>,
    /// Fitted exponent `γ` in `[u'_ε]_{1/2} ~ ε^{−γ}`.
    pub holder_growth: Option<RateFit>,
    /// `(max − min)/max` of `‖u'_ε‖∞` over the four smallest ε.
    pub lipschitz_variation: f64,
}

/// Runs the ε-sweep against the homogenized solution with constant `a_bar`.
pub fn rate_sweep(profile: &Profile1D, a_bar: f64, prob: &BvProblem1D, eps: &[f64], mesh_per_period: usize) -> Result<RateReport, BvpError> {
    let rows = eps
        .par_iter()
        .map(|&e| -> Result<SweepRow, BvpError> {
            let u_eps = solve_eps_1d(profile, prob, e, mesh_per_period)?;
            let u = solve_homogenized_1d(a_bar, prob, &u_eps.mesh)?;
            let phi = dirichlet_corrector_1d(&profile.q, e, prob.domain, mesh_per_period)?;
            let norms = error_norms(&u_eps, &u, &phi)?;
            let lipschitz = u_eps.derivative.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let holder_half = half_holder_seminorm(&u_eps.mesh.nodes, &u_eps.derivative, 2.0 * e);
            Ok(SweepRow { eps: e, norms, lipschitz, holder_half })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let fit = |pick: fn(&SweepRow) -> f64| -> Option<RateFit> {
        let errs: Vec<f64> = rows.iter().map(pick).collect();
        fit_rate(eps, &errs).ok()
    };
    let inv_growth = {
        let g: Vec<f64> = rows.iter().map(|r| r.holder_half).collect();
        fit_rate(eps, &g).ok().map(|mut f| {
            f.slope = -f.slope;
            f
        })
    };
    let mut by_eps: Vec<&SweepRow> = rows.iter().collect();
    by_eps.sort_by(|a, b| a.eps.total_cmp(&b.eps));
    let tail: Vec<f64> = by_eps.iter().take(4).map(|r| r.lipschitz).collect();
    let lmax = tail.iter().cloned().fold(0.0, f64::max);
    let lmin = tail.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(RateReport {
        l2: fit(|r| r.norms.l2),
        linf: fit(|r| r.norms.linf),
        h1_raw: fit(|r| r.norms.h1_raw),
        h1_corrected: fit(|r| r.norms.h1_corrected),
        holder_growth: inv_growth,
        lipschitz_variation: if lmax > 0.0 { (lmax - lmin) / lmax } else { 0.0 },
        a_bar,
        rows,
    })
}

/// `u'' + u'/ε = 1` on `(0, 1)` with zero boundary values.
pub fn counterexample_closed_form(eps: f64, x: f64) -> f64 {
    // e^{−x/ε} − 1 and e^{−1/ε} − 1 via exp_m1 keep small ε accurate
    eps * (x - (-x / eps).exp_m1() / (-1.0 / eps).exp_m1())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CounterexampleRow {
    pub eps: f64,
    pub max_abs: f64,
    pub max_error: f64,
    pub value_at_half: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CounterexampleReport {
    pub rows: Vec<CounterexampleRow>,
    pub centering_defect: f64,
    /// `u_ε → 0` uniformly, yet `u ≡ 0` solves no elliptic problem with source 1.
    pub limit_is_degenerate: bool,
}

/// Solves the non-centered problem `u'' + u'/ε = 1`, `u(0) = u(1) = 0`
/// through the general drift route and compares with the closed form.
///
/// In operator form this is `ã = 1`, `b̃ = 1` with source `−1`: the invariant
/// measure is `m ≡ 1` and the unit drift survives as `β ≡ 1`.
pub fn noncentered_counterexample(profile: &Profile1D, centering_defect: f64, eps: &[f64], mesh_per_period: usize) -> Result<CounterexampleReport, BvpError> {
    let source = crate::expr::parse_expression("-1", 1).expect("constant expression");
    let prob = BvProblem1D {
        domain: Domain1D::unit(),
        source,
        boundary: [0.0, 0.0],
    };
    let rows = eps
        .par_iter()
        .map(|&e| -> Result<CounterexampleRow, BvpError> {
            let sol = solve_eps_1d(profile, &prob, e, mesh_per_period)?;
            let mut max_abs: f64 = 0.0;
            let mut max_error: f64 = 0.0;
            for (x, u) in sol.mesh.nodes.iter().zip(&sol.values) {
                max_abs = max_abs.max(u.abs());
                max_error = max_error.max((u - counterexample_closed_form(e, *x)).abs());
            }
            let half = DiscreteSolution::value_at(&sol, 0.5);
            Ok(CounterexampleRow { eps: e, max_abs, max_error, value_at_half: half })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let limit_is_degenerate = rows.iter().all(|r| r.max_abs <= r.eps);
    Ok(CounterexampleReport {
        rows,
        centering_defect,
        limit_is_degenerate,
    })
}

impl DiscreteSolution {
    /// Value at `x` from the left boundary value plus the quadrature of `u'`
    /// over the panels up to `x`.
    pub fn value_at(&self, x: f64) -> f64 {
        let mesh = &self.mesh;
        if x <= mesh.domain.x0 {
            return self.boundary[0];
        }
        if x >= mesh.domain.x1 {
            return self.boundary[1];
        }
        let p = mesh.breaks.partition_point(|&b| b <= x).saturating_sub(1).min(mesh.panels() - 1);
        let (lo, hi) = (mesh.breaks[p], mesh.breaks[p + 1]);
        let k = PANEL_ORDER;
        let du = &self.derivative[p * k..(p + 1) * k];
        // value at the panel start, then integrate the Lagrange interpolant of u'
        let start = if p == 0 {
            self.boundary[0]
        } else {
            let prev = &self.derivative[(p - 1) * k..p * k];
            let half = 0.5 * (mesh.breaks[p] - mesh.breaks[p - 1]);
            let last = (p - 1) * k + k - 1;
            let s_last: f64 = mesh.rule.integration[k - 1].iter().zip(prev).map(|(a, b)| a * b).sum();
            let total: f64 = mesh.rule.weights.iter().zip(prev).map(|(a, b)| a * b).sum();
            self.values[last] + half * (total - s_last)
        };
        let t = 2.0 * (x - lo) / (hi - lo) - 1.0;
        let half = 0.5 * (hi - lo);
        let nodes = &mesh.rule.nodes;
        // ∫_{-1}^{t} L_j by the Gauss rule on [-1, t]
        let mut acc = 0.0;
        for (s, w) in nodes.iter().zip(&mesh.rule.weights) {
            let tau = -1.0 + 0.5 * (t + 1.0) * (s + 1.0);
            let interp: f64 = (0..k)
                .map(|j| {
                    let lj: f64 = (0..k).filter(|&l| l != j).map(|l| (tau - nodes[l]) / (nodes[j] - nodes[l])).product();
                    lj * du[j]
                })
                .sum();
            acc += w * 0.5 * (t + 1.0) * interp;
        }
        start + half * acc
    }
}
