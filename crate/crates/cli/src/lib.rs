//! Command-line front end: configuration, file IO and the `estimate`,
//! `simulate` and `bandwidth` subcommands.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub mod config;
pub mod io;
pub mod run;

pub use config::RunConfig;
pub use run::Outcome;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {message}", path.display())]
    Csv { path: PathBuf, message: String },
    #[error("{} exists; pass --overwrite to replace it", .0.display())]
    WouldOverwrite(PathBuf),
    #[error(transparent)]
    Panel(#[from] catt_core::panel::PanelError),
    #[error(transparent)]
    Pipeline(#[from] catt_core::pipeline::PipelineError),
    #[error("{0}")]
    Simulation(String),
    #[error("thread pool: {0}")]
    Threads(String),
}

#[derive(Debug, Parser)]
#[command(name = "catt", version, about = "Doubly robust conditional group-time treatment effects")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate CATT curves and uniform bands from a panel CSV.
    Estimate(RunConfig),
    /// Run a Monte Carlo experiment on simulated panels.
    Simulate(RunConfig),
    /// Report plug-in bandwidths per cell.
    Bandwidth(RunConfig),
}

/// Resolves the configuration and runs the command, on a pool of
/// `threads` workers when given.
pub fn dispatch(command: &Command) -> Result<Outcome, CliError> {
    let (flags, f): (&RunConfig, fn(&RunConfig) -> Result<Outcome, CliError>) = match command {
        Command::Estimate(c) => (c, run::run_estimate),
        Command::Simulate(c) => (c, run::run_simulate),
        Command::Bandwidth(c) => (c, run::run_bandwidth),
    };
    let cfg = config::resolve(flags)?;
    match cfg.threads {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| CliError::Threads(e.to_string()))?
            .install(|| f(&cfg)),
        None => f(&cfg),
    }
}
