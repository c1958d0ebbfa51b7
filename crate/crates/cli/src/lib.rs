//! Command-line driver: every command reads one TOML run config plus a few
//! flags and writes plain report files into the output directory.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use ehrgen_core::generate::GenerateError;
use ehrgen_core::metrics::MetricsError;
use ehrgen_core::model::ModelError;
use ehrgen_core::privacy::PrivacyError;
use ehrgen_core::records::RecordsError;
use ehrgen_core::utility::UtilityError;

pub mod commands;
pub mod config;

pub use commands::{run, Context};
pub use config::{GenerateMode, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "ehrgen", version, about = "Train, sample and audit a prompt-conditioned generator of synthetic patient records")]
pub struct Cli {
    /// TOML run configuration; every field has a default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Model checkpoint; defaults to `<out>/checkpoint.json`.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Global seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Record count for `generate` and `oracle-corpus`.
    #[arg(long, global = true)]
    pub n: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train a model on `data.train` and write a checkpoint.
    Train,
    /// Sample records from scratch or complete an existing corpus.
    Generate {
        #[arg(long, value_enum)]
        mode: Option<GenerateMode>,
    },
    /// Per-patient lpl and mpl with median and bootstrap intervals.
    Evaluate,
    /// Membership inference through a shadow model.
    AttackMi,
    /// Attribute inference sweep over the delta grid, with control arm.
    AttackAi,
    /// Next-visit diagnosis recall@k for real, synthetic and mixed arms.
    Utility,
    /// Write an oracle corpus, its schema and a train/val/test split.
    OracleCorpus,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Generate { .. } => "generate",
            Command::Evaluate => "evaluate",
            Command::AttackMi => "attack-mi",
            Command::AttackAi => "attack-ai",
            Command::Utility => "utility",
            Command::OracleCorpus => "oracle-corpus",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config invalid at {path}: {message}")]
    Config { path: String, message: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Io { .. } => 1,
        }
    }

    fn config(path: &str, e: impl std::fmt::Display) -> Self {
        CliError::Config { path: path.into(), message: e.to_string() }
    }
}

impl From<RecordsError> for CliError {
    fn from(e: RecordsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFiniteLoss { .. } | ModelError::NumericOverflow(_) => CliError::Numeric(e.to_string()),
            ModelError::InvalidConfig(m) => CliError::config("model", m),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<GenerateError> for CliError {
    fn from(e: GenerateError) -> Self {
        match e {
            GenerateError::Model(e) => e.into(),
            GenerateError::InvalidConfig(m) => CliError::config("generation", m),
            GenerateError::InvalidPolicy(m) => CliError::config("generate.policy", m),
            GenerateError::NotADistribution(_) => CliError::Numeric(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Model(e) => e.into(),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<PrivacyError> for CliError {
    fn from(e: PrivacyError) -> Self {
        match e {
            PrivacyError::Model(e) => e.into(),
            PrivacyError::Metrics(e) => e.into(),
            PrivacyError::InvalidConfig(m) => CliError::config("attack", m),
            PrivacyError::EmptyGrid | PrivacyError::UnsortedGrid => CliError::config("attack.ai", e),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<UtilityError> for CliError {
    fn from(e: UtilityError) -> Self {
        match e {
            UtilityError::Generate(e) => e.into(),
            UtilityError::Records(e) => e.into(),
            UtilityError::InvalidConfig(m) => CliError::config("utility", m),
            UtilityError::NonFiniteLoss(_) => CliError::Numeric(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}
