//! Command-line front end for `exactsde-core`.
//!
//! Exit codes: 0 success (or representable), 1 configuration or runtime
//! error, 2 not representable, 3 inconclusive.

pub mod commands;
pub mod config;
pub mod expr;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use exactsde_core::simulate::Scheme;
use thiserror::Error;

use crate::config::{ConfigFile, Overrides, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Parse(#[from] expr::ParseError),
    #[error(transparent)]
    Core(#[from] exactsde_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Parser)]
#[command(name = "exactsde", version, about = "Representability checks and exact simulation for Ito diffusions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Catalog model id (overrides the config's model).
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    #[arg(long, global = true, env = "EXACTSDE_SEED")]
    pub seed: Option<u64>,
    /// Step size of the Euler and Milstein schemes.
    #[arg(long, global = true)]
    pub dt: Option<f64>,
    #[arg(long, global = true)]
    pub t_end: Option<f64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = config::parse_scheme)]
    pub scheme: Option<Scheme>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub tol: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Decide representability; exit 0, 2 or 3.
    Check,
    /// Straighten the diffusion numerically and compare with the closed form.
    Straighten,
    /// Build and validate the representation; `--out` receives its CSV.
    Build,
    /// Simulate paths; CSV to `--out` (or stdout), summary JSON.
    Simulate,
    /// Exact sampler against Euler at equal weak error.
    Benchmark,
}

/// Result of a command: JSON report, exit code and optional CSV payload.
pub struct Outcome {
    pub report: serde_json::Value,
    pub code: i32,
    pub csv: Option<Vec<u8>>,
}

impl Cli {
    pub fn load(&self) -> Result<RunConfig, CliError> {
        let file = match &self.config {
            Some(path) => ConfigFile::from_toml(&std::fs::read_to_string(path)?)?,
            None => ConfigFile::default(),
        };
        let ov = Overrides {
            model: self.model.clone(),
            paths: self.paths,
            seed: self.seed,
            dt: self.dt,
            t_end: self.t_end,
            out: self.out.clone(),
            scheme: self.scheme,
            threads: self.threads,
            tol: self.tol,
        };
        RunConfig::resolve(file, ov)
    }
}

/// Runs a command on a resolved configuration inside a thread pool of the
/// configured size.
pub fn execute(command: Command, cfg: &RunConfig) -> Result<Outcome, CliError> {
    let run = || match command {
        Command::Check => commands::check(cfg),
        Command::Straighten => commands::straighten(cfg),
        Command::Build => commands::build(cfg),
        Command::Simulate => commands::simulate(cfg),
        Command::Benchmark => commands::benchmark(cfg),
    };
    match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Config(e.to_string()))?
            .install(run),
        None => run(),
    }
}

/// Parses arguments, runs the command and writes its outputs. Returns the
/// process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(stderr, "{e}");
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = cli.load().and_then(|cfg| {
        let outcome = execute(cli.command, &cfg)?;
        emit(&cfg, outcome, stdout, stderr)
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            1
        }
    }
}

fn emit(cfg: &RunConfig, outcome: Outcome, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32, CliError> {
    let json = serde_json::to_string_pretty(&outcome.report)?;
    match (&outcome.csv, &cfg.out) {
        (Some(csv), Some(path)) => {
            std::fs::write(path, csv)?;
            writeln!(stdout, "{json}")?;
        }
        (Some(csv), None) => {
            stdout.write_all(csv)?;
            writeln!(stderr, "{json}")?;
        }
        (None, _) => writeln!(stdout, "{json}")?,
    }
    Ok(outcome.code)
}
