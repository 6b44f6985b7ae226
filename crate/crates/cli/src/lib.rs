//! The `hte` command-line pipeline: simulate or ingest, impute, balance,
//! estimate, fit the causal forest and its diagnostics, report.
//!
//! Every command is a pure function of its input files, flags and seed, so
//! reruns write byte-identical files.

pub mod analysis;
pub mod commands;
pub mod config;
pub mod io;

use std::process::ExitCode;

pub use config::{Cli, Command, Opts, RunConfig};

/// Version stamped into every JSON output.
pub const SCHEMA_VERSION: &str = "1.0";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config, paths or input layout.
    Config(String),
    MissingSeed,
    /// Failure while computing.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) | CliError::MissingSeed => ExitCode::from(2),
            CliError::Runtime(_) => ExitCode::from(1),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::MissingSeed => write!(f, "configuration error: --seed is required (there is no default seed)"),
            CliError::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<hte_core::Error> for CliError {
    fn from(e: hte_core::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Runs one command with resolved settings.
pub fn run(command: Command, opts: &Opts) -> CliResult<()> {
    let cfg = config::resolve(opts)?;
    cfg.seed()?;
    commands::check_paths(&cfg)?;
    if let Some(t) = cfg.threads {
        if t == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    match command {
        Command::Simulate => commands::simulate(&cfg),
        Command::Impute => commands::impute(&cfg),
        Command::Balance => commands::balance(&cfg),
        Command::Estimate => commands::estimate(&cfg),
        Command::Forest => commands::forest(&cfg),
        Command::Rank => commands::rank(&cfg),
        Command::Blp => commands::blp(&cfg),
        Command::Calibrate => commands::calibrate(&cfg),
        Command::Report => commands::report(&cfg),
    }
}
