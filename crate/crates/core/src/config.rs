//! Run configuration: one JSON document drives every pipeline stage.
//!
//! [`parse_config`] is the single entry point for untrusted text. It checks
//! the document shape with serde, then resolves every expression and range
//! so later stages only see validated data.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bvp::rect2d::{Rect, RectProblem};
use crate::bvp::{BvProblem1D, Domain1D};
use crate::expr::{parse_expression, Expression, ParseError};
use crate::measure::{CoefficientSet, MeasureError};
use crate::sde::{SdeConfig, SdeError};
use crate::torus::{FieldError, TorusGrid};

pub const PRESETS: &[&str] = &[
    "identity",
    "centered-1d",
    "noncentered-1d",
    "laminated-2d",
    "shear-2d",
    "harmonic-1d",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("malformed config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{field}: {source}")]
    Expression {
        field: String,
        #[source]
        source: ParseError,
    },
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Grid(#[from] FieldError),
    #[error("problem block: {0}")]
    Problem(String),
    #[error("mc block: {0}")]
    Mc(#[from] SdeError),
    #[error("unknown preset `{0}`; known: {known}", known = PRESETS.join(", "))]
    UnknownPreset(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub dimension: usize,
    /// Row-major `d×d` expressions in `y1..yd`.
    pub a_tilde: Vec<Vec<String>>,
    pub b_tilde: Vec<String>,
    /// Torus grid sizes, one per axis.
    pub grid: Vec<usize>,
    #[serde(default)]
    pub problem: Option<ProblemConfig>,
    #[serde(default)]
    pub mc: Option<SdeConfig>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default = "default_output")]
    pub output: String,
}

fn default_output() -> String {
    "out".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    /// `[lo, hi]` per axis.
    pub domain: Vec<[f64; 2]>,
    /// Source in `x1..xd`.
    pub f: String,
    /// Dirichlet data in `x1..xd`.
    pub g: String,
    pub eps: Vec<f64>,
    /// Grid points per ε-cell and axis; solver default when absent.
    #[serde(default)]
    pub mesh_per_period: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Relative residual for the invariant-measure solve.
    pub measure: f64,
    /// Relative residual for the cell problems.
    pub cell: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { measure: 1e-10, cell: 1e-10 }
    }
}

#[derive(Debug, Clone)]
pub enum ProblemKind {
    Line(BvProblem1D),
    Rect(RectProblem),
}

#[derive(Debug, Clone)]
pub struct ResolvedProblem {
    pub kind: ProblemKind,
    pub eps: Vec<f64>,
    pub mesh_per_period: Option<usize>,
}

/// A config with every expression parsed and every range checked.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    pub grid: TorusGrid,
    pub a_tilde: Vec<Vec<Expression>>,
    pub b_tilde: Vec<Expression>,
    pub problem: Option<ResolvedProblem>,
    pub warnings: Vec<String>,
}

impl ResolvedConfig {
    /// Samples the coefficients; fails only on numerical grounds (ellipticity).
    pub fn coefficients(&self) -> Result<CoefficientSet, MeasureError> {
        CoefficientSet::from_expressions(&self.grid, &self.a_tilde, &self.b_tilde)
    }
}

pub fn parse_config(text: &str) -> Result<ResolvedConfig, ConfigError> {
    let config: RunConfig = serde_json::from_str(text)?;
    config.resolve()
}

fn torus_expr(field: String, src: &str, d: usize) -> Result<Expression, ConfigError> {
    let e = parse_expression(src, d).map_err(|source| ConfigError::Expression { field: field.clone(), source })?;
    if e.uses_x() {
        return Err(ConfigError::Shape(format!("{field}: coefficients depend on y only")));
    }
    Ok(e)
}

fn domain_expr(field: &str, src: &str, d: usize) -> Result<Expression, ConfigError> {
    let e = parse_expression(src, d).map_err(|source| ConfigError::Expression { field: field.into(), source })?;
    if e.uses_y() {
        return Err(ConfigError::Shape(format!("{field}: problem data depend on x only")));
    }
    Ok(e)
}

impl RunConfig {
    pub fn resolve(self) -> Result<ResolvedConfig, ConfigError> {
        let d = self.dimension;
        if !(1..=3).contains(&d) {
            return Err(ConfigError::Shape(format!("dimension {d} not in 1..=3")));
        }
        if self.a_tilde.len() != d || self.a_tilde.iter().any(|r| r.len() != d) {
            return Err(ConfigError::Shape(format!("a_tilde must be {d}x{d}")));
        }
        if self.b_tilde.len() != d {
            return Err(ConfigError::Shape(format!("b_tilde must have {d} entries")));
        }
        if self.grid.len() != d {
            return Err(ConfigError::Shape(format!("grid must have {d} sizes")));
        }
        let grid = TorusGrid::new(&self.grid)?;
        let mut warnings = Vec::new();
        let mut a_tilde = Vec::with_capacity(d);
        for i in 0..d {
            let mut row = Vec::with_capacity(d);
            for j in 0..d {
                let (aij, aji) = (self.a_tilde[i][j].trim(), self.a_tilde[j][i].trim());
                let field = format!("a_tilde[{i}][{j}]");
                if aij == aji {
                    row.push(torus_expr(field, aij, d)?);
                } else {
                    // parse both halves first so errors name the offending entry
                    torus_expr(field, aij, d)?;
                    torus_expr(format!("a_tilde[{j}][{i}]"), aji, d)?;
                    if i < j {
                        warnings.push(format!("a_tilde[{i}][{j}] and a_tilde[{j}][{i}] differ; using their average"));
                    }
                    let (lo, hi) = if i < j { (aij, aji) } else { (aji, aij) };
                    row.push(torus_expr(format!("a_tilde[{i}][{j}]"), &format!("0.5*(({lo})+({hi}))"), d)?);
                }
            }
            a_tilde.push(row);
        }
        let b_tilde = self
            .b_tilde
            .iter()
            .enumerate()
            .map(|(i, s)| torus_expr(format!("b_tilde[{i}]"), s, d))
            .collect::<Result<Vec<_>, _>>()?;
        let problem = self.problem.as_ref().map(|p| resolve_problem(p, d)).transpose()?;
        if let Some(mc) = &self.mc {
            mc.validate()?;
        }
        for (name, v) in [("measure", self.tolerances.measure), ("cell", self.tolerances.cell)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(ConfigError::Shape(format!("tolerances.{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(ResolvedConfig { config: self, grid, a_tilde, b_tilde, problem, warnings })
    }
}

fn resolve_problem(p: &ProblemConfig, d: usize) -> Result<ResolvedProblem, ConfigError> {
    if p.domain.len() != d {
        return Err(ConfigError::Problem(format!("domain needs {d} intervals")));
    }
    if let Some([lo, hi]) = p.domain.iter().find(|[lo, hi]| !(lo.is_finite() && hi.is_finite() && lo < hi)) {
        return Err(ConfigError::Problem(format!("empty interval [{lo}, {hi}]")));
    }
    if p.eps.is_empty() {
        return Err(ConfigError::Problem("eps list is empty".into()));
    }
    if let Some(e) = p.eps.iter().find(|&&e| !(e > 0.0 && e <= 1.0)) {
        return Err(ConfigError::Problem(format!("eps {e} outside (0, 1]")));
    }
    let mut sorted = p.eps.clone();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(ConfigError::Problem("eps values repeat".into()));
    }
    if p.mesh_per_period == Some(0) {
        return Err(ConfigError::Problem("mesh_per_period must be positive".into()));
    }
    let source = domain_expr("problem.f", &p.f, d)?;
    let boundary = domain_expr("problem.g", &p.g, d)?;
    let problem = match d {
        1 => {
            let [x0, x1] = p.domain[0];
            let domain = Domain1D::new(x0, x1).map_err(|e| ConfigError::Problem(e.to_string()))?;
            let g = |x: f64| {
                boundary
                    .evaluate(&[x])
                    .map_err(|e| ConfigError::Problem(format!("g at x = {x}: {e}")))
            };
            ProblemKind::Line(BvProblem1D { domain, source, boundary: [g(x0)?, g(x1)?] })
        }
        2 => {
            let ([x0, x1], [y0, y1]) = (p.domain[0], p.domain[1]);
            ProblemKind::Rect(RectProblem { domain: Rect { x0, x1, y0, y1 }, source, boundary })
        }
        _ => return Err(ConfigError::Problem("boundary value problems need d = 1 or 2".into())),
    };
    Ok(ResolvedProblem { kind: problem, eps: p.eps.clone(), mesh_per_period: p.mesh_per_period })
}

fn strings<const N: usize>(v: [&str; N]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn dyadic(lo: i32, hi: i32) -> Vec<f64> {
    (lo..=hi).map(|k| 2f64.powi(-k)).collect()
}

/// Built-in configurations; `None` for an unknown name.
pub fn preset(name: &str) -> Option<RunConfig> {
    let line = |f: &str, eps: Vec<f64>| ProblemConfig {
        domain: vec![[0.0, 1.0]],
        f: f.into(),
        g: "0".into(),
        eps,
        mesh_per_period: Some(64),
    };
    let square = |eps: Vec<f64>| ProblemConfig {
        domain: vec![[0.0, 1.0], [0.0, 1.0]],
        f: "1".into(),
        g: "0".into(),
        eps,
        mesh_per_period: Some(16),
    };
    let base = |dimension: usize, a: Vec<Vec<String>>, b: Vec<String>, grid: Vec<usize>| RunConfig {
        name: Some(name.into()),
        dimension,
        a_tilde: a,
        b_tilde: b,
        grid,
        problem: None,
        mc: None,
        tolerances: Tolerances::default(),
        output: default_output(),
    };
    let cfg = match name {
        "identity" => RunConfig {
            problem: Some(square(dyadic(1, 4))),
            mc: Some(SdeConfig::default()),
            ..base(2, vec![strings(["1", "0"]), strings(["0", "1"])], strings(["0", "0"]), vec![16, 16])
        },
        "centered-1d" => RunConfig {
            problem: Some(line("1", dyadic(3, 7))),
            ..base(1, vec![strings(["1"])], strings(["cos(2*pi*y1)"]), vec![256])
        },
        "noncentered-1d" => RunConfig {
            problem: Some(line("-1", dyadic(3, 7))),
            ..base(1, vec![strings(["1"])], strings(["1"]), vec![64])
        },
        "harmonic-1d" => RunConfig {
            problem: Some(line("1", dyadic(3, 7))),
            mc: Some(SdeConfig::default()),
            ..base(1, vec![strings(["2+sin(2*pi*y1)"])], strings(["0"]), vec![256])
        },
        "laminated-2d" => RunConfig {
            problem: Some(square(dyadic(1, 4))),
            ..base(
                2,
                vec![
                    strings(["2+sin(2*pi*y1)", "0.3*sin(2*pi*y1)"]),
                    strings(["0.3*sin(2*pi*y1)", "1+0.5*cos(2*pi*y1)"]),
                ],
                strings([
                    "(2+sin(2*pi*y1))*cos(2*pi*y1)",
                    "(2+sin(2*pi*y1))*exp(-sin(2*pi*y1)/(2*pi))*sin(4*pi*y1)",
                ]),
                vec![128, 16],
            )
        },
        "shear-2d" => RunConfig {
            problem: Some(square(dyadic(1, 5))),
            mc: Some(SdeConfig::default()),
            ..base(2, vec![strings(["1", "0"]), strings(["0", "1"])], strings(["0", "cos(2*pi*y1)"]), vec![64, 16])
        },
        _ => return None,
    };
    Some(cfg)
}

pub fn preset_or_err(name: &str) -> Result<RunConfig, ConfigError> {
    preset(name).ok_or_else(|| ConfigError::UnknownPreset(name.into()))
}
