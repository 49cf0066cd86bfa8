//! Command-line interface for functional mixed-model effect selection:
//! dataset simulation, penalized fits, grid tuning, Monte Carlo studies,
//! and curve export for plotting.
//!
//! Exit codes: 0 on success, 2 on configuration or input errors, 3 when a
//! numeric procedure fails.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use funmix::Error;

#[derive(Parser)]
#[command(
    name = "funmix",
    version,
    about = "Simultaneous selection of fixed and random functional effects",
    propagate_version = true
)]
struct Cli {
    /// TOML configuration file; command-line flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory, created if missing (default: current directory).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads (default: available parallelism; FUNMIX_WORKERS
    /// overrides the config file).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset together with its generating truth.
    Simulate(config::ScenarioOverrides),
    /// Fit one model at fixed spike scales.
    Fit(commands::FitArgs),
    /// Search spike scales and basis dimensions by the information criterion.
    Tune(commands::TuneArgs),
    /// Run a Monte Carlo study and tabulate selection and curve error.
    Benchmark(commands::BenchmarkArgs),
    /// Evaluate a stored fit's coefficient curves on a grid.
    EvalCurves(commands::EvalCurvesArgs),
    /// Tabulate a cubic B-spline basis for plotting.
    Basis(commands::BasisArgs),
}

fn run(cli: Cli) -> funmix::Result<()> {
    let cfg = config::load(cli.config.as_deref())?;
    if let Some(workers) = config::resolve_workers(&cfg, cli.workers)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| Error::Parameter(format!("cannot configure {workers} workers: {e}")))?;
    }
    let out = commands::ensure_out_dir(&cfg, cli.out)?;
    match &cli.command {
        Command::Simulate(overrides) => commands::simulate(&cfg, overrides, &out),
        Command::Fit(args) => commands::fit(&cfg, args, &out),
        Command::Tune(args) => commands::tune(&cfg, args, &out),
        Command::Benchmark(args) => commands::benchmark(&cfg, args, &out),
        Command::EvalCurves(args) => commands::eval_curves(&cfg, args, &out),
        Command::Basis(args) => commands::basis(args, &out),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) | Error::NonFinite { .. } | Error::TuningFailed { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
