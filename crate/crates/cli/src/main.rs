//! `physseg`: phantom generation, simulation, PGS labelling, training,
//! inference, calibration, sweeps, harmonisation and study reports.
//!
//! Exit codes: 0 success, 1 validation error (bad arguments, config or
//! missing inputs), 2 runtime error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(physseg::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => f.write_str(m),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<physseg::Error> for CliError {
    fn from(e: physseg::Error) -> Self {
        CliError::Runtime(e)
    }
}

#[derive(Debug, Parser)]
#[command(name = "physseg", version, about = "Physics-informed, contrast-agnostic tissue segmentation pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration (defaults apply when omitted).
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `--set model.learning_rate=0.005`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom cohort (quantitative maps and true labels).
    Phantom(commands::PhantomArgs),
    /// Simulate one acquisition of a quantitative map.
    Simulate(commands::SimulateArgs),
    /// Fit the tissue mixture and write PGS labels.
    Pgs(commands::PgsArgs),
    /// Train one experiment arm on a cohort.
    Train(commands::TrainArgs),
    /// Segment a simulated image, optionally with Monte-Carlo samples.
    Infer(commands::InferArgs),
    /// Calibrate volumetric intervals and measure their coverage.
    Calibrate(commands::CalibrateArgs),
    /// Map calibrated interval width over an acquisition grid.
    Sweep(commands::SweepArgs),
    /// Remove site effects from a feature table with ComBat.
    Harmonize(commands::HarmonizeArgs),
    /// Run a study over trained arms and write its tables and figures.
    Report(commands::ReportArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.global.jobs {
        if n == 0 {
            return Err(CliError::Validation("--jobs must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(format!("--jobs: {e}")))?;
    }
    let cfg = config::RunConfig::load(cli.global.config.as_deref(), &cli.global.sets)?;
    match cli.command {
        Command::Phantom(a) => commands::phantom(&cfg, a),
        Command::Simulate(a) => commands::simulate(&cfg, a),
        Command::Pgs(a) => commands::pgs(&cfg, a),
        Command::Train(a) => commands::train(&cfg, a),
        Command::Infer(a) => commands::infer(&cfg, a),
        Command::Calibrate(a) => commands::calibrate(&cfg, a),
        Command::Sweep(a) => commands::sweep(&cfg, a),
        Command::Harmonize(a) => commands::harmonize(&cfg, a),
        Command::Report(a) => commands::report(&cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Validation(_) => 1,
                CliError::Runtime(_) => 2,
            })
        }
    }
}
