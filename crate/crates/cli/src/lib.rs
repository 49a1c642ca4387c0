//! `jtp`: run simulations, solvers and martingale checks from a JSON
//! config and write CSV/JSON artifacts.

pub mod commands;
pub mod config;
pub mod error;
pub mod expr;
pub mod output;

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "jtp", version, about = "Damped jump-telegraph processes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Overrides the solver time step.
    #[arg(long, global = true, value_name = "F")]
    pub dt: Option<f64>,
    /// Overrides the Monte Carlo path count.
    #[arg(long, global = true, value_name = "N")]
    pub paths: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Sample paths; write paths.csv and estimates.json.
    Simulate,
    /// Analytic and Monte Carlo densities; write density.csv and density.json.
    Density,
    /// Volterra moments; write moments.csv and moments.json.
    Moments,
    /// Balance identity and Volterra mean; write balance.json and check.json.
    Check,
    /// Likelihood-ratio weighted means; write girsanov.csv and girsanov.json.
    Girsanov,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    execute(&cli)
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config PATH is required".into()))?;
    if let Some(dt) = cli.dt {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(CliError::Usage(format!("--dt must be finite and > 0, got {dt}")));
        }
    }
    let threads = match cli.threads {
        Some(0) => return Err(CliError::Usage("--threads must be >= 1".into())),
        Some(n) => n,
        None => 0,
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg = config::parse(&text)?;
    let spec = cfg.model.build()?;
    let overrides = commands::Overrides {
        seed: cli.seed,
        dt: cli.dt,
        paths: cli.paths,
    };
    output::prepare_dir(&cli.out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {threads} threads: {e}")))?;
    let out = cli.out.as_path();
    pool.install(|| match cli.command {
        Command::Simulate => commands::simulate(&cfg, &spec, &overrides, out),
        Command::Density => commands::density(&cfg, &spec, &overrides, out),
        Command::Moments => commands::moments(&cfg, &spec, &overrides, out),
        Command::Check => commands::check(&cfg, &spec, &overrides, out),
        Command::Girsanov => commands::girsanov(&cfg, &spec, &overrides, out),
    })
}
