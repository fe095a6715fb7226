//! The `act` command-line tool.
//!
//! Every command reads an experiment config, runs on a worker pool of
//! `--workers` (or `ACT_WORKERS`) threads, and writes its outputs together
//! with a `manifest.json` into `--out`. `act rerun` replays a manifest.

use std::path::PathBuf;
use std::sync::atomic::AtomicBool;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod commands;
pub mod config;
pub mod manifest;

pub use config::ExperimentConfig;
pub use manifest::RunManifest;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime fault: {0}")]
    Runtime(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("interrupted: {0}")]
    Interrupted(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) | CliError::Interrupted(_) => 3,
            CliError::Verification(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<act_core::meta::MetaError> for CliError {
    fn from(e: act_core::meta::MetaError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<act_core::ppo::PpoError> for CliError {
    fn from(e: act_core::ppo::PpoError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<act_core::analysis::AnalysisError> for CliError {
    fn from(e: act_core::analysis::AnalysisError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "act", version, about = "Cheap talk channel attacks on RL victims")]
pub struct Cli {
    /// Worker threads.
    #[arg(long, env = "ACT_WORKERS", global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Meta-train a message function against (or alongside) victim training.
    TrainTraintime(TrainTraintimeArgs),
    /// Co-evolve a train-time and a goal-conditioned test-time message function.
    TrainTesttime(TrainTesttimeArgs),
    /// Train victims next to a baseline message source.
    Baseline(BaselineArgs),
    /// Train a reference policy for the goal-conditioned task.
    Oracle(OracleArgs),
    /// Analyses of trained victims and curve files.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Check the tabular propositions on the chain.
    Verify(VerifyArgs),
    /// Replay a manifest into a new output directory.
    Rerun(RerunArgs),
}

/// Options shared by commands that read a config.
#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `[meta] master_seed`. TOML integers are signed, so at most `i64::MAX`.
    #[arg(long, value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Ally,
    Adversary,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainTraintimeArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Continue from an `es_checkpoint.json`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainTesttimeArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub checkpoint_every: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Zeroes,
    Random,
    Nochannel,
    Rarl,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum)]
    pub adversary: BaselineKind,
    /// Victims to train; defaults to `[meta] eval_victims`.
    #[arg(long)]
    pub seeds: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKind {
    /// PPO message policy against victims trained with `--phi`.
    TesttimePpo,
    /// PPO message policy against victims trained with a random message function.
    RandomShaper,
    /// PPO acting on the goal-conditioned task directly.
    Direct,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct OracleArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum)]
    pub kind: OracleKind,
    /// Parameter file whose first segment is the train-time message function.
    #[arg(long)]
    pub phi: Option<PathBuf>,
    /// Evaluation seeds; defaults to `[meta.test_time] eval_seeds`.
    #[arg(long)]
    pub seeds: Option<usize>,
}

/// Message source for analyses: a trained parameter file or a baseline.
#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct SourceArgs {
    #[arg(long, conflicts_with = "adversary")]
    pub phi: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub adversary: Option<BaselineKind>,
}

#[derive(Clone, Debug, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnalyzeCommand {
    /// Cosine distances between per-timestep-bin gradient updates.
    Interference(InterferenceArgs),
    /// Victim policy outputs over a grid of messages.
    Sweep(SweepArgs),
    /// Mean and standard error across trace files.
    Curves(CurvesArgs),
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct InterferenceArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long, default_value_t = 5)]
    pub victims: usize,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long, default_value_t = 10)]
    pub victims: usize,
    #[arg(long, default_value_t = 5)]
    pub probes: usize,
    /// Points per message axis.
    #[arg(long, default_value_t = 41)]
    pub grid: usize,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct CurvesArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value = "mean_reward")]
    pub column: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Proposition {
    Prop1,
    Prop2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TabularVictim {
    Tabular,
    TabularNonUniform,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct VerifyArgs {
    #[arg(value_enum)]
    pub proposition: Proposition,
    #[command(flatten)]
    pub run: RunArgs,
    /// Q-learning episodes per victim (prop1).
    #[arg(long, default_value_t = 300)]
    pub episodes: usize,
    /// Victim seeds (prop1).
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long, value_enum, default_value_t = TabularVictim::Tabular)]
    pub victim: TabularVictim,
    /// Discount factor (prop2).
    #[arg(long, default_value_t = 0.9)]
    pub gamma: f64,
    /// Episode budget per adversary (prop2).
    #[arg(long, default_value_t = 20_000)]
    pub budget: usize,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Runs `cli` on a pool of its worker count. `stop` interrupts meta-training
/// at the next generation boundary.
pub fn run(cli: Cli, stop: Option<&AtomicBool>) -> Result<(), CliError> {
    let workers = cli.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Runtime(format!("worker pool: {e}")))?;
    pool.install(|| commands::dispatch(&cli.command, workers, stop))
}
