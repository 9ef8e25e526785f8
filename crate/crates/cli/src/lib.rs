//! Batch front-end for the gpide solver: reads one JSON configuration, runs a
//! subcommand and writes CSV, JSON and binary artifacts.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::Outcome;
pub use config::ExperimentConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "gpide", version, about = "G-expectation PIDE solver and verification lab")]
pub struct Args {
    #[command(subcommand)]
    pub command: Command,
    /// JSON configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, overriding `output.dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Reserved. Every computation is deterministic.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Solve for the largest n and dump the grid.
    Solve,
    /// Fit the empirical convergence order over the n list.
    RateStudy,
    /// Sweep the consistency residual over s.
    Consistency,
    /// Evaluate the generator G at the configured points.
    GeneratorEval,
    /// Moments, Γ, K_ζ and error budgets.
    Report,
}

/// Run a parsed command line, returning the outcome or the error that sets
/// the exit code.
pub fn execute(args: &Args) -> Result<Outcome, CliError> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &args.out {
        config.output.dir = out.clone();
    }
    let prepared = config.prepare()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = args.workers {
        if w == 0 {
            return Err(CliError::Config("--workers must be ≥ 1".into()));
        }
        pool = pool.num_threads(w);
    }
    let pool = pool.build().map_err(|e| CliError::Config(e.to_string()))?;
    let dir = prepared.config.output.dir.clone();
    pool.install(|| match args.command {
        Command::Solve => commands::solve_cmd(&prepared, &dir),
        Command::RateStudy => commands::rate_study_cmd(&prepared, &dir),
        Command::Consistency => commands::consistency_cmd(&prepared, &dir),
        Command::GeneratorEval => commands::generator_eval_cmd(&prepared, &dir),
        Command::Report => commands::report_cmd(&prepared, &dir),
    })
}

/// Parse `argv`, run, print, and return the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&args) {
        Ok(out) => {
            for l in &out.lines {
                println!("{l}");
            }
            for f in &out.files {
                println!("wrote {}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
