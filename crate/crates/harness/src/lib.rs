//! Desk-scale federated learning experiments: partitioning, configuration,
//! runs, sweeps and run comparison.

pub mod compare;
pub mod config;
pub mod partition;
pub mod runner;
pub mod sweep;

pub use compare::{compare_runs, Comparison, RunMetrics};
pub use config::ExperimentConfig;
pub use partition::{make_partition, Partition, PartitionSpec};
pub use runner::{run_experiment, RoundRecord, RunOutcome};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("partition: {0}")]
    Partition(String),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("run {run} reports `{found}`, expected `{expected}`")]
    MismatchedMetrics {
        expected: String,
        found: String,
        run: String,
    },
    #[error(transparent)]
    Core(#[from] fedsim_core::Error),
    #[error(transparent)]
    Net(#[from] fedsim_net::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
