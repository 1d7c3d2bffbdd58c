use anyhow::{anyhow, Context};
use periodic_homog::bvp::rect2d::{rect_sweep, RectReport, DEFAULT_MESH_PER_PERIOD_2D};
use periodic_homog::bvp::{
    noncentered_counterexample, rate_sweep, CounterexampleReport, Profile1D, RateFit, RateReport, DEFAULT_MESH_PER_PERIOD,
};
use periodic_homog::cell::{homogenized_tensor, solve_cells, CellOptions, CellSolution, HomogenizedTensor};
use periodic_homog::config::{ProblemKind, ResolvedConfig};
use periodic_homog::measure::{
    invariant_measure_1d_closed_form, laminated_centering_integrals, solve_invariant_measure, Centering, CoefficientSet,
    InvariantMeasure, MeasureOptions,
};
use periodic_homog::sde::{
    check_consistency, estimate_diffusivity, simulate_paths, Consistency, DiffusivityEstimate, SdeCoefficients, SdeConfig,
};
use periodic_homog::transform::{transform, TransformError, TransformedCoefficients};
use serde::{Deserialize, Serialize};

use crate::output::Outputs;
use crate::{Failure, OrExit, CENTERING, CONFIG, NUMERIC};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateReport {
    pub name: Option<String>,
    pub dimension: usize,
    pub grid: Vec<usize>,
    /// Smallest eigenvalue of `ã` over the grid.
    pub lambda: f64,
    pub big_lambda: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureReport {
    pub residual: f64,
    pub min: f64,
    pub max: f64,
    pub centering_defect: Vec<f64>,
    pub centering: Centering,
    pub iterations: usize,
    pub direct: bool,
    /// Max-norm distance to the 1D closed form (d = 1 only).
    pub closed_form_diff: Option<f64>,
    /// Centering integrals computed from the coefficients alone, when they
    /// depend on `y1` only.
    pub laminated_integrals: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformReport {
    pub forced: bool,
    pub lambda1: f64,
    pub big_lambda1: f64,
    /// `‖∂_l φ_lj − β_j‖∞`.
    pub divergence_residual: f64,
    pub phi_max_abs: f64,
    pub phi_antisymmetry: f64,
    pub phi_mean_max_abs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomogenizeReport {
    pub tensor: HomogenizedTensor,
    pub residuals: Vec<f64>,
    pub residuals_nondiv: Vec<f64>,
    /// `‖χ̃ − χ‖∞`.
    pub form_mismatch: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatesReport {
    Line(RateReport),
    Rect(RectReport),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McReport {
    pub config: SdeConfig,
    pub steps: usize,
    pub a_bar: Vec<Vec<f64>>,
    pub estimate: DiffusivityEstimate,
    pub consistency: Consistency,
}

/// One thresholded quantity; `--check` turns a failing one into exit 5.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Check {
    pub name: String,
    /// `None` when the quantity could not be computed (e.g. too few points
    /// for a fit).
    pub value: Option<f64>,
    pub bound: String,
    pub pass: bool,
}

fn at_least(name: &str, value: f64, lo: f64) -> Check {
    Check { name: name.into(), value: value.is_finite().then_some(value), bound: format!(">= {lo}"), pass: value >= lo }
}

fn at_most(name: &str, value: f64, hi: f64) -> Check {
    Check { name: name.into(), value: value.is_finite().then_some(value), bound: format!("<= {hi}"), pass: value <= hi }
}

fn slope(fit: &Option<RateFit>) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.slope)
}

pub struct Pipeline {
    pub cfg: ResolvedConfig,
    pub out: Outputs,
    pub force: bool,
    pub seed: Option<u64>,
    pub checks: Vec<Check>,
    pub stages: Vec<String>,
    coeffs: Option<CoefficientSet>,
    measure: Option<InvariantMeasure>,
    transformed: Option<TransformedCoefficients>,
    cells: Option<(CellSolution, HomogenizedTensor)>,
}

impl Pipeline {
    pub fn new(cfg: ResolvedConfig, out: Outputs, force: bool, seed: Option<u64>) -> Self {
        Pipeline {
            cfg,
            out,
            force,
            seed,
            checks: Vec::new(),
            stages: Vec::new(),
            coeffs: None,
            measure: None,
            transformed: None,
            cells: None,
        }
    }

    fn done(&mut self, stage: &str) {
        self.stages.push(stage.into());
    }

    pub fn validate(&mut self) -> Result<(), Failure> {
        if self.coeffs.is_some() {
            return Ok(());
        }
        for w in &self.cfg.warnings {
            eprintln!("warning: {w}");
        }
        let coeffs = self.cfg.coefficients().or_exit(NUMERIC)?;
        let report = ValidateReport {
            name: self.cfg.config.name.clone(),
            dimension: coeffs.dim(),
            grid: self.cfg.grid.sizes().to_vec(),
            lambda: coeffs.lambda(),
            big_lambda: coeffs.big_lambda(),
            warnings: self.cfg.warnings.clone(),
        };
        self.out.json("validate.json", &report).or_exit(NUMERIC)?;
        eprintln!("validate: lambda = {}, Lambda = {}", report.lambda, report.big_lambda);
        self.coeffs = Some(coeffs);
        self.done("validate");
        Ok(())
    }

    /// Solves for `m`; a non-centered result is an error unless forced.
    pub fn measure(&mut self) -> Result<(), Failure> {
        self.validate()?;
        if self.measure.is_none() {
            let coeffs = self.coeffs.as_ref().expect("validated");
            let opts = MeasureOptions { tol: self.cfg.config.tolerances.measure, ..Default::default() };
            let m = solve_invariant_measure(coeffs, &opts).or_exit(NUMERIC)?;
            let closed_form_diff = if coeffs.dim() == 1 {
                let exact = invariant_measure_1d_closed_form(coeffs).or_exit(NUMERIC)?;
                Some(m.m.max_diff(&exact).or_exit(NUMERIC)?)
            } else {
                None
            };
            let report = MeasureReport {
                residual: m.residual,
                min: m.min_value,
                max: m.max_value,
                centering_defect: m.centering_defect.clone(),
                centering: m.centering,
                iterations: m.stats.iterations,
                direct: m.stats.direct,
                closed_form_diff,
                laminated_integrals: laminated_centering_integrals(coeffs).ok(),
            };
            self.out.json("measure.json", &report).or_exit(NUMERIC)?;
            self.out.field("m", std::slice::from_ref(&m.m), &["m"]).or_exit(NUMERIC)?;
            eprintln!("measure: centering defect {:?} ({:?})", report.centering_defect, report.centering);
            self.measure = Some(m);
            self.done("measure");
        }
        let m = self.measure.as_ref().expect("just solved");
        match m.centering {
            Centering::NonCentered if !self.force => Err(Failure::new(
                CENTERING,
                anyhow!(
                    "centering condition fails: defect {:?} exceeds the non-centered threshold; \
                     homogenization does not apply (rerun with --force-noncentered to continue)",
                    m.centering_defect
                ),
            )),
            Centering::Marginal => {
                eprintln!("warning: centering defect {:?} is small but above the centered threshold", m.centering_defect);
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn noncentered(&self) -> bool {
        self.measure.as_ref().is_some_and(|m| m.centering == Centering::NonCentered)
    }

    pub fn transform(&mut self) -> Result<(), Failure> {
        self.measure()?;
        if self.transformed.is_some() {
            return Ok(());
        }
        let coeffs = self.coeffs.as_ref().expect("validated");
        let m = self.measure.as_ref().expect("measured");
        let tc = transform(coeffs, m, self.force).map_err(|e| match e {
            TransformError::NonCentered { .. } => Failure::new(CENTERING, e.into()),
            _ => Failure::new(NUMERIC, e.into()),
        })?;
        let d = coeffs.dim();
        let mut antisym: f64 = 0.0;
        let mut mean: f64 = 0.0;
        for i in 0..d {
            mean = mean.max(tc.phi.get(i, i).max_abs());
            for j in 0..d {
                let s = tc.phi.get(i, j).add(tc.phi.get(j, i)).or_exit(NUMERIC)?;
                antisym = antisym.max(s.max_abs());
                mean = mean.max(tc.phi.get(i, j).mean().abs());
            }
        }
        let report = TransformReport {
            forced: self.force && m.centering == Centering::NonCentered,
            lambda1: tc.lambda1,
            big_lambda1: tc.big_lambda1,
            divergence_residual: tc.divergence_residual,
            phi_max_abs: tc.phi.max_abs(),
            phi_antisymmetry: antisym,
            phi_mean_max_abs: mean,
        };
        self.out.json("transform.json", &report).or_exit(NUMERIC)?;
        let names = matrix_names("phi", d);
        self.out.field("phi", tc.phi.comps(), &names.iter().map(String::as_str).collect::<Vec<_>>()).or_exit(NUMERIC)?;
        let names = matrix_names("q", d);
        self.out.field("q", tc.q.comps(), &names.iter().map(String::as_str).collect::<Vec<_>>()).or_exit(NUMERIC)?;
        let names: Vec<String> = (1..=d).map(|i| format!("beta{i}")).collect();
        self.out.field("beta", tc.beta.comps(), &names.iter().map(String::as_str).collect::<Vec<_>>()).or_exit(NUMERIC)?;
        eprintln!("transform: lambda1 = {}, Lambda1 = {}", tc.lambda1, tc.big_lambda1);
        self.transformed = Some(tc);
        self.done("transform");
        Ok(())
    }

    pub fn homogenize(&mut self) -> Result<(), Failure> {
        self.transform()?;
        if self.cells.is_some() {
            return Ok(());
        }
        let coeffs = self.coeffs.as_ref().expect("validated");
        let m = self.measure.as_ref().expect("measured");
        let tc = self.transformed.as_ref().expect("transformed");
        let opts = CellOptions { tol: self.cfg.config.tolerances.cell, ..Default::default() };
        let cells = solve_cells(coeffs, &tc.q, &opts).or_exit(NUMERIC)?;
        let tensor = homogenized_tensor(&tc.q, coeffs, &m.m, &cells, tc.lambda1).or_exit(NUMERIC)?;
        let report = HomogenizeReport {
            tensor: tensor.clone(),
            residuals: cells.residuals.clone(),
            residuals_nondiv: cells.residuals_nondiv.clone(),
            form_mismatch: cells.form_mismatch(),
        };
        self.out.json("homogenized.json", &report).or_exit(NUMERIC)?;
        let d = coeffs.dim();
        let names: Vec<String> = (1..=d).map(|i| format!("chi{i}")).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        self.out.field("chi", &cells.chi, &names).or_exit(NUMERIC)?;
        self.out.field("chi_nondiv", &cells.chi_nondiv, &names).or_exit(NUMERIC)?;
        eprintln!("homogenize: a_bar = {:?}", tensor.a_bar);
        self.cells = Some((cells, tensor));
        self.done("homogenize");
        Ok(())
    }

    pub fn rates(&mut self) -> Result<(), Failure> {
        let problem = self
            .cfg
            .problem
            .clone()
            .ok_or_else(|| Failure::new(CONFIG, anyhow!("`rates` needs a problem block in the config")))?;
        self.homogenize()?;
        let m = &self.measure.as_ref().expect("measured").m;
        let tc = self.transformed.as_ref().expect("transformed");
        let a_bar = &self.cells.as_ref().expect("homogenized").1.a_bar;
        let report = match &problem.kind {
            ProblemKind::Line(prob) => {
                let profile = if self.noncentered() { Profile1D::with_drift(tc, m) } else { Profile1D::centered(tc, m) }
                    .or_exit(NUMERIC)?;
                let mpp = problem.mesh_per_period.unwrap_or(DEFAULT_MESH_PER_PERIOD);
                let r = rate_sweep(&profile, a_bar[0][0], prob, &problem.eps, mpp).or_exit(NUMERIC)?;
                let smallest = r.rows.iter().min_by(|a, b| a.eps.total_cmp(&b.eps)).expect("non-empty eps list");
                let ratio = smallest.norms.h1_raw / smallest.norms.h1_corrected;
                self.checks.extend([
                    at_least("rates.l2_slope", slope(&r.l2), 0.9),
                    at_least("rates.linf_slope", slope(&r.linf), 0.9),
                    at_least("rates.h1_corrected_slope", slope(&r.h1_corrected), 0.9),
                    at_most("rates.h1_raw_slope", slope(&r.h1_raw), 0.2),
                    at_least("rates.h1_raw_over_corrected_at_smallest_eps", ratio, 10.0),
                    at_most("rates.lipschitz_variation", r.lipschitz_variation, 0.05),
                    at_least("rates.holder_growth_exponent_lo", slope(&r.holder_growth), 0.4),
                    at_most("rates.holder_growth_exponent_hi", slope(&r.holder_growth), 0.6),
                ]);
                let rows: Vec<Vec<f64>> = r
                    .rows
                    .iter()
                    .map(|x| vec![x.eps, x.norms.l2, x.norms.linf, x.norms.h1_raw, x.norms.h1_corrected, x.lipschitz, x.holder_half])
                    .collect();
                self.out
                    .table("rates.csv", &["eps", "l2", "linf", "h1_raw", "h1_corrected", "lipschitz", "holder_half"], &rows)
                    .or_exit(NUMERIC)?;
                eprintln!(
                    "rates: slopes L2 {:.3}, Linf {:.3}, H1 raw {:.3}, H1 corrected {:.3}",
                    slope(&r.l2),
                    slope(&r.linf),
                    slope(&r.h1_raw),
                    slope(&r.h1_corrected)
                );
                RatesReport::Line(r)
            }
            ProblemKind::Rect(prob) => {
                let mpp = problem.mesh_per_period.unwrap_or(DEFAULT_MESH_PER_PERIOD_2D);
                let a = [[a_bar[0][0], a_bar[0][1]], [a_bar[1][0], a_bar[1][1]]];
                let r = rect_sweep(&tc.q, m, a, prob, &problem.eps, mpp).or_exit(NUMERIC)?;
                self.checks.push(at_least("rates.rect_l2_slope", slope(&r.l2), 0.8));
                let rows: Vec<Vec<f64>> = r
                    .rows
                    .iter()
                    .map(|x| vec![x.eps, x.nodes_per_axis as f64, x.norms.l2, x.norms.h1_raw, x.norms.h1_corrected])
                    .collect();
                self.out
                    .table("rates.csv", &["eps", "nodes_per_axis", "l2", "h1_raw", "h1_corrected"], &rows)
                    .or_exit(NUMERIC)?;
                eprintln!("rates (experimental 2D): L2 slope {:.3}", slope(&r.l2));
                RatesReport::Rect(r)
            }
        };
        self.out.json("rates.json", &report).or_exit(NUMERIC)?;
        self.done("rates");
        Ok(())
    }

    /// The unit-drift example on which homogenization fails; always forced.
    pub fn counterexample(&mut self) -> Result<(), Failure> {
        self.force = true;
        self.validate()?;
        if !self.unit_drift() {
            return Err(Failure::new(CONFIG, anyhow!("`counterexample` needs d = 1 with a_tilde = 1 and b_tilde = 1")));
        }
        self.transform()?;
        let m = self.measure.as_ref().expect("measured");
        let tc = self.transformed.as_ref().expect("transformed");
        let profile = Profile1D::with_drift(tc, &m.m).or_exit(NUMERIC)?;
        let (eps, mpp) = match &self.cfg.problem {
            Some(p) => (p.eps.clone(), p.mesh_per_period.unwrap_or(DEFAULT_MESH_PER_PERIOD)),
            None => ((3..=7).map(|k| 2f64.powi(-k)).collect(), DEFAULT_MESH_PER_PERIOD),
        };
        let r: CounterexampleReport =
            noncentered_counterexample(&profile, m.centering_defect[0], &eps, mpp).or_exit(NUMERIC)?;
        let worst = r.rows.iter().fold(0.0_f64, |a, x| a.max(x.max_error));
        let bounded = r.rows.iter().fold(f64::NEG_INFINITY, |a, x| a.max(x.max_abs / x.eps));
        self.checks.push(at_most("counterexample.max_error", worst, 1e-10));
        self.checks.push(at_most("counterexample.max_abs_over_eps", bounded, 1.0));
        let rows: Vec<Vec<f64>> = r.rows.iter().map(|x| vec![x.eps, x.max_abs, x.max_error, x.value_at_half]).collect();
        self.out.table("counterexample.csv", &["eps", "max_abs", "max_error", "value_at_half"], &rows).or_exit(NUMERIC)?;
        self.out.json("counterexample.json", &r).or_exit(NUMERIC)?;
        eprintln!("counterexample: max error vs closed form {worst:e}, max |u|/eps {bounded:.3}");
        self.done("counterexample");
        Ok(())
    }

    fn unit_drift(&self) -> bool {
        self.coeffs.as_ref().is_some_and(|c| {
            c.dim() == 1
                && c.a_tilde().get(0, 0).map(|v| v - 1.0).max_abs() <= 1e-14
                && c.b_tilde().comp(0).map(|v| v - 1.0).max_abs() <= 1e-14
        })
    }

    pub fn mc(&mut self) -> Result<(), Failure> {
        self.homogenize()?;
        let coeffs = self.coeffs.as_ref().expect("validated");
        let m = &self.measure.as_ref().expect("measured").m;
        let a_bar = self.cells.as_ref().expect("homogenized").1.a_bar.clone();
        let mut cfg = self.cfg.config.mc.unwrap_or_default();
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate().or_exit(CONFIG)?;
        let sc = SdeCoefficients::new(coeffs, Some(m), cfg.interpolation).or_exit(NUMERIC)?;
        let ends = simulate_paths(&sc, &cfg).or_exit(NUMERIC)?;
        let estimate = estimate_diffusivity(&ends, cfg.horizon).or_exit(NUMERIC)?;
        let consistency = check_consistency(&estimate, &a_bar);
        self.checks.push(Check {
            name: "mc.consistency".into(),
            value: Some(consistency.max_deviation),
            bound: format!("<= {:e} and mean drift within 3 stderr", consistency.allowed),
            pass: consistency.pass,
        });
        eprintln!("mc: D = {:?} (stderr {:?}), a_bar = {:?}", estimate.diffusivity, estimate.stderr, a_bar);
        let report = McReport { config: cfg, steps: cfg.steps(), a_bar, estimate, consistency };
        self.out.json("mc.json", &report).context("writing mc report").or_exit(NUMERIC)?;
        self.done("mc");
        Ok(())
    }

    /// Every stage the config supports, in order.
    pub fn all(&mut self) -> Result<(), Failure> {
        self.measure()?;
        if self.noncentered() {
            // forced: homogenization does not apply, so only the drift route runs
            self.transform()?;
            if self.unit_drift() {
                self.counterexample()?;
            } else {
                eprintln!("note: counterexample skipped (needs the unit-drift 1D coefficients)");
            }
            return Ok(());
        }
        self.homogenize()?;
        if self.cfg.problem.is_some() {
            self.rates()?;
        }
        if self.cfg.config.mc.is_some() {
            self.mc()?;
        }
        Ok(())
    }
}

fn matrix_names(stem: &str, d: usize) -> Vec<String> {
    (1..=d).flat_map(|i| (1..=d).map(move |j| format!("{stem}{i}{j}"))).collect()
}
