//! Command-line front end.

pub mod config;
pub mod run;

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

pub use config::{parse_config, ExperimentKind, RunConfig};
pub use run::{execute, write_artifacts, Manifest, Summary};

use crate::error::{Error, Result};
use crate::experiments::ou_oracle;

/// Environment variable consulted when `--threads` is absent.
pub const THREADS_ENV: &str = "SPDE_REFLECT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "spde-reflect", version, about = "Reflection couplings of monotone SPDEs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every experiment listed in the config.
    Run(CommonArgs),
    /// Check the monotonicity, interpolation and spectrum conditions.
    CheckConditions(CommonArgs),
    /// Simulate the reflection coupling and report survival and the osc(f) bound.
    Couple(CommonArgs),
    /// Fit the contraction rate of the synchronous coupling.
    FitRate(CommonArgs),
    /// Print Ornstein-Uhlenbeck moments of the linear model.
    Oracle(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Config file (positional form).
    #[arg(value_name = "CONFIG")]
    pub path: Option<PathBuf>,
    #[arg(long, value_name = "PATH", conflicts_with = "path")]
    pub config: Option<PathBuf>,
    /// Overrides `sim.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

impl CommonArgs {
    fn load(&self) -> Result<RunConfig> {
        let path = self
            .config
            .as_ref()
            .or(self.path.as_ref())
            .ok_or_else(|| Error::ConfigSemantic("no config file given".into()))?;
        let text = std::fs::read_to_string(path)?;
        let mut cfg = parse_config(&text)?;
        if let Some(seed) = self.seed {
            cfg.sim.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.to_string_lossy().into_owned();
        }
        Ok(cfg)
    }

    fn threads(&self) -> Result<usize> {
        if let Some(n) = self.threads {
            return Ok(n);
        }
        match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::ConfigSemantic(format!("{THREADS_ENV} must be an integer, got {v:?}"))),
            Err(_) => Ok(0),
        }
    }
}

/// Parses `args` and runs the command. Returns the process exit code:
/// 0 on success, 1 when a check failed, 2 on usage or input errors.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    let (args, only) = match &command {
        Command::Run(a) => (a, None),
        Command::CheckConditions(a) => (a, Some(vec![ExperimentKind::Conditions])),
        Command::Couple(a) => (
            a,
            Some(vec![
                ExperimentKind::Survival,
                ExperimentKind::CouplingInequality,
                ExperimentKind::Gluing,
            ]),
        ),
        Command::FitRate(a) => (a, Some(vec![ExperimentKind::Contraction])),
        Command::Oracle(a) => return oracle(a),
    };
    let mut cfg = args.load()?;
    if let Some(kinds) = only {
        cfg.experiments.run = kinds;
    }
    let threads = args.threads()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::ConfigSemantic(format!("thread pool: {e}")))?;
    let start = Instant::now();
    let summary = pool.install(|| execute(&cfg))?;
    let wall = start.elapsed().as_secs_f64();
    let dir = write_artifacts(&cfg, &summary, &PathBuf::from(&cfg.output.dir), pool.current_num_threads(), wall)?;

    if matches!(command, Command::CheckConditions(_)) {
        print_conditions(&summary);
    }
    for e in &summary.experiments {
        for (flag, ok) in &e.pass_flags {
            println!("{:<8} {}/{}", if *ok { "pass" } else { "FAIL" }, e.experiment_id, flag);
        }
        for (name, rate) in &e.fitted_rates {
            println!(
                "rate     {}/{} = {:.6} [{:.6}, {:.6}]",
                e.experiment_id, name, rate.rate, rate.ci_low, rate.ci_high
            );
        }
    }
    println!("results  {}", dir.display());
    match summary.failure_report() {
        Some(report) => {
            eprintln!("{report}");
            Ok(1)
        }
        None => Ok(0),
    }
}

fn print_conditions(summary: &Summary) {
    println!("{:<24} {:>8} {:>10} {:>14}  verdict", "condition", "samples", "violations", "worst margin");
    for c in &summary.conditions {
        println!(
            "{:<24} {:>8} {:>10} {:>14.6e}  {:?}",
            c.condition_id, c.sample_count, c.violation_count, c.worst_margin, c.verdict
        );
    }
    println!("{:<24} {:>10} {:>8} {:>10} {:>8}", "spectrum", "exponent", "finite", "scanned", "finite");
    for s in &summary.spectrum {
        println!(
            "{:<24} {:>10.4} {:>8} {:>10.4} {:>8}",
            s.condition, s.exponent, s.finite, s.scanned_exponent, s.scanned_finite
        );
    }
    if let Some(n) = &summary.nash {
        println!("nash: m = {} < {} is {}", n.m, n.bound, n.passes);
    }
}

fn oracle(args: &CommonArgs) -> Result<i32> {
    let mut cfg = args.load()?;
    cfg.experiments.run = vec![ExperimentKind::OuOracle];
    cfg.validate()?;
    let space = cfg.space()?;
    let (x, _) = cfg.initial_states(&space);
    let t = cfg.sim.horizon;
    println!("mode {:>24} {:>24}   (t = {t})", "mean", "variance");
    for (i, m) in ou_oracle(&space, &x, t)?.iter().enumerate() {
        println!("{:>4} {:>24.16e} {:>24.16e}", i + 1, m.mean, m.variance);
    }
    Ok(0)
}
