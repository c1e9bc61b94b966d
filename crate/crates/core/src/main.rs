use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spdegrf::cli::{self, RunConfig};

#[derive(Parser)]
#[command(name = "spdegrf", about = "Stationary and non-stationary Gaussian random field fitting on sparse grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration file (flat key = value TOML).
    #[arg(long)]
    config: PathBuf,
    /// Skip malformed or out-of-domain station rows instead of failing.
    #[arg(long)]
    skip_bad: bool,
    /// Random seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Holdout fraction override for scoring.
    #[arg(long)]
    holdout: Option<f64>,
    /// Longitude threshold splitting the nugget into west/east regions.
    #[arg(long)]
    region_split: Option<f64>,
    /// Force a stationary (constant-field) model.
    #[arg(long)]
    stationary: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model and write fit.json.
    Fit(Common),
    /// Predict on the grid; writes prediction.csv and covsummary.csv.
    Predict(Common),
    /// Score a seeded random holdout; writes scores.json.
    Score(Common),
    /// Cross-validate penalty precisions; writes cv.json.
    Cv(Common),
    /// Simulate a stations file from true parameters.
    Simulate(Common),
    /// Empirical semivariogram; writes variogram.csv.
    Variogram(Common),
    /// Remove a common spatial mean from replicated data.
    Detrend(Common),
}

fn load_config(common: &Common) -> spdegrf::Result<RunConfig> {
    let mut config = RunConfig::from_file(&common.config)?;
    if common.skip_bad {
        config.skip_bad = true;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(holdout) = common.holdout {
        config.holdout = holdout;
    }
    if let Some(split) = common.region_split {
        config.region_split = Some(split);
    }
    if common.stationary {
        config.stationary = true;
    }
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, run): (&Common, fn(&RunConfig) -> spdegrf::Result<()>) = match &cli.command {
        Command::Fit(c) => (c, cli::run_fit),
        Command::Predict(c) => (c, cli::run_predict),
        Command::Score(c) => (c, cli::run_score),
        Command::Cv(c) => (c, cli::run_cv),
        Command::Simulate(c) => (c, cli::run_simulate),
        Command::Variogram(c) => (c, cli::run_variogram),
        Command::Detrend(c) => (c, cli::run_detrend),
    };
    match load_config(common).and_then(|config| run(&config)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
