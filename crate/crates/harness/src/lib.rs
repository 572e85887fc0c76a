//! Experiment orchestration for `decmarl`: TOML configs, per-seed runs with
//! CSV learning curves and a JSON summary, paired baseline comparison, and
//! oracle-backed verification runs.

pub mod compare;
pub mod config;
pub mod experiments;

use thiserror::Error;

pub use compare::{compare_baselines, CompareReport};
pub use config::{ExperimentConfig, ExperimentKind, Method};
pub use experiments::{run_experiment, Check, ExperimentOutput};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("method {method} has a budget of {steps} steps, expected {expected}")]
    BudgetMismatch { method: String, steps: u64, expected: u64 },
    #[error("config file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("csv: {0}")]
    Csv(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Mdp(#[from] decmarl::mdp::MdpError),
    #[error(transparent)]
    Tabular(#[from] decmarl::tabular::TabularError),
    #[error(transparent)]
    Continuous(#[from] decmarl::continuous::ContinuousError),
    #[error(transparent)]
    Env(#[from] decmarl::envs::EnvError),
    #[error(transparent)]
    Consensus(#[from] decmarl::consensus::ConsensusError),
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        Self::Csv(e.to_string())
    }
}
