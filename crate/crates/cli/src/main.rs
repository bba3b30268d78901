//! Command-line front end: simulate data, train sparse forecasters, run
//! order-selection studies and build prediction intervals.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("cannot write output: {0}")]
    Output(String),
    #[error(transparent)]
    Core(#[from] sparsets::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Output(_) | CliError::Core(sparsets::Error::Io(_)) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Conformal,
}

#[derive(Debug, Parser)]
#[command(name = "sparsets", version, about = "Sparse Bayesian RNN forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Also report a comparison baseline (uq only).
    #[arg(long, global = true, value_enum)]
    baseline: Option<Baseline>,
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Simulate a series or panel and write it as CSV with a manifest.
    Simulate,
    /// Fit a sparse network and write checkpoint, mask and training log.
    Train,
    /// Order selection over simulated replicates.
    SelectOrder,
    /// Prediction intervals from a trained checkpoint.
    Uq,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Config("--config is required".into()))?;
    let cfg = RunConfig::load(path)?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| CliError::Config("no output directory (use --out or out_dir)".into()))?;
    if cli.baseline.is_some() && !matches!(cli.command, Command::Uq) {
        return Err(CliError::Config("--baseline only applies to uq".into()));
    }
    std::fs::create_dir_all(&out).map_err(|e| CliError::Output(format!("{}: {e}", out.display())))?;
    match cli.command {
        Command::Simulate => commands::simulate(&cfg, &out),
        Command::Train => commands::train(&cfg, &out),
        Command::SelectOrder => commands::select_order(&cfg, &out),
        Command::Uq => commands::uq(&cfg, &out, cli.baseline == Some(Baseline::Conformal)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
