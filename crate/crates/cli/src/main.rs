//! `phomog`: runs the homogenization pipeline from one JSON config.
//!
//! Exit codes: 0 success, 2 config error, 3 centering violated, 4 numerical
//! failure, 5 a threshold failed under `--check`.

mod output;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use periodic_homog::config::{parse_config, preset_or_err, RunConfig, Tolerances};
use serde::{Deserialize, Serialize};

use output::{FileEntry, Outputs};
use pipeline::{Check, Pipeline};

pub const CONFIG: u8 = 2;
pub const CENTERING: u8 = 3;
pub const NUMERIC: u8 = 4;
pub const CHECK: u8 = 5;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: anyhow::Error) -> Self {
        Failure { code, error }
    }
}

pub trait OrExit<T> {
    fn or_exit(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrExit<T> for Result<T, E> {
    fn or_exit(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure::new(code, e.into()))
    }
}

#[derive(Parser)]
#[command(name = "phomog", version, about = "Periodic homogenization with large drift: solve, homogenize, verify rates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse the config and scan the ellipticity of the diffusion matrix.
    Validate(RunArgs),
    /// Invariant measure and centering defect.
    Measure(RunArgs),
    /// Weighted drift, flux tensor and the divergence-form matrix q.
    Transform(RunArgs),
    /// Cell problems and the effective tensor.
    Homogenize(RunArgs),
    /// ε-sweep of the boundary value problem with fitted rates.
    Rates(RunArgs),
    /// Unit-drift example where homogenization fails (implies --force-noncentered).
    Counterexample(RunArgs),
    /// Monte Carlo estimate of the effective diffusivity.
    Mc(RunArgs),
    /// Every stage the config supports.
    All(RunArgs),
    /// Print a built-in config as JSON.
    Preset {
        /// identity, centered-1d, noncentered-1d, laminated-2d, shear-2d, harmonic-1d
        name: String,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file.
    #[arg(required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Use a built-in config instead of a file.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Master seed for the Monte Carlo stage (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Exit 5 when a rate or consistency threshold fails.
    #[arg(long)]
    check: bool,
    /// Continue past a failed centering condition.
    #[arg(long)]
    force_noncentered: bool,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Summary {
    subcommand: String,
    stages: Vec<String>,
    checks: Vec<Check>,
    all_checks_pass: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    tool: String,
    version: String,
    subcommand: String,
    config: RunConfig,
    seed: Option<u64>,
    tolerances: Tolerances,
    force_noncentered: bool,
    files: Vec<FileEntry>,
    /// Seconds since the Unix epoch; the only run-dependent value written.
    created_unix: u64,
}

fn load(args: &RunArgs) -> Result<periodic_homog::config::ResolvedConfig, Failure> {
    match (&args.config, &args.preset) {
        (_, Some(name)) => preset_or_err(name).and_then(RunConfig::resolve).or_exit(CONFIG),
        (Some(path), None) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .or_exit(CONFIG)?;
            parse_config(&text)
                .with_context(|| format!("in {}", path.display()))
                .or_exit(CONFIG)
        }
        (None, None) => Err(Failure::new(CONFIG, anyhow!("give a config file or --preset"))),
    }
}

fn run(name: &str, args: &RunArgs, stage: fn(&mut Pipeline) -> Result<(), Failure>) -> Result<(), Failure> {
    let cfg = load(args)?;
    let dir = args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.config.output));
    let out = Outputs::new(&dir).or_exit(CONFIG)?;
    let mut p = Pipeline::new(cfg, out, args.force_noncentered, args.seed);
    let result = stage(&mut p);
    // reports of finished stages stay on disk even when a later one fails
    let all_checks_pass = p.checks.iter().all(|c| c.pass);
    let summary = Summary {
        subcommand: name.into(),
        stages: p.stages.clone(),
        checks: p.checks.clone(),
        all_checks_pass,
    };
    p.out.json("summary.json", &summary).or_exit(NUMERIC)?;
    let mut config = p.cfg.config.clone();
    if let (Some(s), Some(mc)) = (args.seed, config.mc.as_mut()) {
        mc.seed = s;
    }
    let manifest = Manifest {
        tool: "phomog".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: name.into(),
        seed: args.seed.or(config.mc.map(|m| m.seed)),
        tolerances: config.tolerances,
        config,
        force_noncentered: p.force,
        files: p.out.files.clone(),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    p.out.json("manifest.json", &manifest).or_exit(NUMERIC)?;
    result?;
    for c in &p.checks {
        let value = c.value.map_or("n/a".to_string(), |v| format!("{v:.6}"));
        println!("{} {} = {} ({})", if c.pass { "PASS" } else { "FAIL" }, c.name, value, c.bound);
    }
    println!("wrote {} files to {}", p.out.files.len(), p.out.dir().display());
    if args.check && !all_checks_pass {
        return Err(Failure::new(CHECK, anyhow!("one or more thresholds failed")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Validate(a) => run("validate", a, Pipeline::validate),
        Command::Measure(a) => run("measure", a, Pipeline::measure),
        Command::Transform(a) => run("transform", a, Pipeline::transform),
        Command::Homogenize(a) => run("homogenize", a, Pipeline::homogenize),
        Command::Rates(a) => run("rates", a, Pipeline::rates),
        Command::Counterexample(a) => run("counterexample", a, Pipeline::counterexample),
        Command::Mc(a) => run("mc", a, Pipeline::mc),
        Command::All(a) => run("all", a, Pipeline::all),
        Command::Preset { name } => preset_or_err(name)
            .or_exit(CONFIG)
            .and_then(|c| serde_json::to_string_pretty(&c).or_exit(NUMERIC))
            .map(|s| println!("{s}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
