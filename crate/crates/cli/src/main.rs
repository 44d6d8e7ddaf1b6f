mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use cfrl::Temperature;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::commands::CliError;

/// Causal falling rule lists: mining, fitting, Gibbs validation and the
/// recovery study as reproducible batch runs.
#[derive(Debug, Parser)]
#[command(name = "cfrl", version)]
struct Cli {
    /// Worker threads for parallel stages (defaults to all cores).
    #[arg(long, global = true, env = "CFRL_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Binarize a dataset and mine the candidate rule pool.
    Mine(MineArgs),
    /// Anneal over rule lists and report per-subgroup effects of the best list.
    Fit(FitArgs),
    /// Run a Gibbs chain on a fitted model and compare it with the variational fit.
    Gibbs(GibbsArgs),
    /// Planted-list recovery study over several sample sizes.
    Recovery(RecoveryArgs),
    /// Rerun the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct InputArgs {
    /// Headered CSV file.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON binarization spec (outcome, treatment and one directive per covariate).
    #[arg(long)]
    pub spec: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct MineArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value_t = 0.05)]
    pub min_support: f64,
    #[arg(long, default_value_t = 2)]
    pub max_clauses: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SearchArgs {
    /// Annealing steps.
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    /// `T` for a constant temperature or `geometric:T0:FACTOR`.
    #[arg(long, default_value = "1", value_parser = parse_temperature)]
    pub temperature: Temperature,
    /// Length of the random starting list.
    #[arg(long, default_value_t = 3)]
    pub init_length: usize,
    /// Longest list the search may visit, default rule excluded.
    #[arg(long, default_value_t = 12)]
    pub max_rules: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FitArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    /// Rule pool JSON written by `mine`.
    #[arg(long)]
    pub pool: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub search: SearchArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GibbsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    /// Model JSON written by `fit`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 5000)]
    pub gibbs_steps: usize,
    /// Discarded sweeps; 20% of the steps when omitted.
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RecoveryArgs {
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',', default_value = "500,2000,8000")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub replicates: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub search: SearchArgs,
    /// Return the planted list instead of searching.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Fresh output directory for the rerun.
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn parse_temperature(s: &str) -> Result<Temperature, String> {
    let bad = || format!("expected `T` or `geometric:T0:FACTOR`, got `{s}`");
    match s.split(':').collect::<Vec<_>>().as_slice() {
        [v] => Ok(Temperature::Constant {
            value: v.parse().map_err(|_| bad())?,
        }),
        ["geometric", t0, f] => Ok(Temperature::Geometric {
            initial: t0.parse().map_err(|_| bad())?,
            factor: f.parse().map_err(|_| bad())?,
        }),
        _ => Err(bad()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Mine(a) => commands::mine(a),
        Command::Fit(a) => commands::fit(a),
        Command::Gibbs(a) => commands::gibbs(a),
        Command::Recovery(a) => commands::recovery(a),
        Command::Replay(a) => commands::replay(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
