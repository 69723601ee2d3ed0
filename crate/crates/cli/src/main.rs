//! `riskcast`: one binary wiring the whole pipeline behind a single config
//! file and seed.
//!
//! Subcommands cover data generation, forecaster and biased-encoder training,
//! forecast and risk evaluation, planning, the experiment suites, and the two
//! diagnostic cost maps. Every run is a pure function of (config, seed,
//! checkpoints): no environment variables are read, `--seed` overrides the
//! config seed, `--threads` caps the worker pool without changing results,
//! and nothing is written outside the configured output directory.
//!
//! Exit codes: 0 success, 1 runtime or training error, 2 usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use riskcast_core::planner::PlanMode;

#[derive(Parser)]
#[command(
    name = "riskcast",
    version,
    about = "Risk-biased trajectory forecasting and planning"
)]
pub struct Cli {
    /// TOML run configuration; all defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Overrides the seed from the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Caps the worker pool; results are identical for any value.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Samples road-crossing scenes into the train and validation datasets.
    GenData,
    /// Trains the trajectory forecaster on the training dataset.
    TrainCvae,
    /// Trains the risk-biased encoder against the forecaster checkpoint.
    TrainBiaser,
    /// Measures displacement and risk metrics over the validation scenes.
    EvalForecast,
    /// Sweeps risk-estimation error against forecast sample count.
    EvalRisk {
        /// Risk levels, comma separated; defaults to the config values.
        #[arg(long, value_delimiter = ',', value_name = "S")]
        sigma: Vec<f64>,
        /// Sample counts, comma separated; defaults to the config values.
        #[arg(long, value_delimiter = ',', value_name = "K")]
        k: Vec<usize>,
    },
    /// Plans one crossing episode and writes the trajectory and objective.
    Plan {
        /// Validation scene to plan against.
        #[arg(long, default_value_t = 0)]
        scene: usize,
        /// Predictor and objective pairing.
        #[arg(long, value_enum, default_value_t = ModeArg::RiskNeutralBiased)]
        mode: ModeArg,
        /// Risk level for the biased predictor or the CVaR objective.
        #[arg(long, default_value_t = 0.95)]
        sigma: f64,
        /// Forecast samples per objective evaluation; defaults to the config.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Runs an experiment suite and writes its report CSVs.
    Experiment {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        /// Overrides the number of planning episodes.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Rasterizes the collision cost seen by the moving robot over the road.
    CostMap,
    /// Rasterizes decoded-forecast cost over the latent grid for one scene.
    LatentMap,
}

/// Planner pairing exposed on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    /// Risk-biased forecasts scored with the plain mean.
    RiskNeutralBiased,
    /// Unbiased forecasts scored with Monte-Carlo CVaR.
    RiskSensitiveUnbiased,
}

impl From<ModeArg> for PlanMode {
    fn from(mode: ModeArg) -> PlanMode {
        match mode {
            ModeArg::RiskNeutralBiased => PlanMode::RiskNeutralBiased,
            ModeArg::RiskSensitiveUnbiased => PlanMode::RiskSensitiveUnbiased,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Forecast,
    Risk,
    Planning,
    All,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
