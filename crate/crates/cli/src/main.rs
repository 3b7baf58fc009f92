//! `iapf`: experiment runner for the iterated auxiliary particle filter.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure.

mod commands;
mod output;
mod spec;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "iapf", version, about = "Twisted particle filters, the iterated APF and particle MCMC experiments")]
pub struct Cli {
    /// JSON experiment configuration.
    #[arg(long, global = true, env = "IAPF_CONFIG")]
    config: Option<PathBuf>,
    /// Master seed; replicate `r` uses `derive_seed(seed, r)`.
    #[arg(long, global = true, env = "IAPF_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, env = "IAPF_REPLICATES", default_value_t = 1)]
    replicates: usize,
    /// Worker threads for replicates.
    #[arg(long, global = true, env = "IAPF_THREADS", default_value_t = 1)]
    threads: usize,
    /// Output directory (a file for `prepare-returns`).
    #[arg(long, global = true, env = "IAPF_OUT")]
    out: Option<PathBuf>,
    /// Omit wall-clock fields so reruns are byte-identical.
    #[arg(long, global = true, env = "IAPF_NO_TIMING")]
    no_timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// One filter run per replicate: log Z^ and the resampling count.
    Filter,
    /// The iterated APF with its per-iteration trace.
    Iapf,
    /// Estimator variability across state dimensions against the Kalman likelihood.
    BenchDim,
    /// Estimator variability across transition parameters.
    BenchParam,
    /// Particle marginal Metropolis-Hastings chains.
    Pmmh,
    /// Replicate likelihood estimates at a list of parameter points.
    Profile,
    /// Smoothing means of one state coordinate, against the Kalman smoother when available.
    Smooth,
    /// Mean-corrected percentage log-returns of price columns.
    PrepareReturns {
        /// CSV of prices, one column per series.
        #[arg(long)]
        input: PathBuf,
    },
}

/// Settings shared by all subcommands.
pub struct Run {
    pub seed: u64,
    pub replicates: usize,
    pub out: Option<PathBuf>,
    pub timing: bool,
    pub pool: rayon::ThreadPool,
}

fn load<T: DeserializeOwned>(path: &Option<PathBuf>) -> Result<T, CliError> {
    let path = path.as_ref().ok_or_else(|| CliError::Config("--config is required".into()))?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    if cli.threads == 0 {
        return Err(CliError::Config("--threads must be at least 1".into()));
    }
    if cli.replicates == 0 {
        return Err(CliError::Config("--replicates must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let run = Run { seed: cli.seed, replicates: cli.replicates, out: cli.out.clone(), timing: !cli.no_timing, pool };
    match &cli.command {
        Command::Filter => commands::filter(&run, load(&cli.config)?),
        Command::Iapf => commands::iapf(&run, load(&cli.config)?),
        Command::BenchDim => commands::bench_dim(&run, load(&cli.config)?),
        Command::BenchParam => commands::bench_param(&run, load(&cli.config)?),
        Command::Pmmh => commands::pmmh(&run, load(&cli.config)?),
        Command::Profile => commands::profile(&run, load(&cli.config)?),
        Command::Smooth => commands::smooth(&run, load(&cli.config)?),
        Command::PrepareReturns { input } => commands::prepare_returns(&run, input),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("iapf: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
