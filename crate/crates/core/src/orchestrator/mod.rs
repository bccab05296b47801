//! Experiment driver: configuration, data preparation, round loop, metrics.

mod config;
mod eval;
mod metrics;
mod model_file;
mod sim;

pub use config::{
    DataSource, FedConfig, HeadShape, LateJoinSettings, PartitionMode, PulseSettings, Seeds,
};
pub use eval::{argmax, evaluate, score_logits, EvalResult};
pub use metrics::{
    read_csv, transfer_bytes, write_csv, CsvRow, RoundReport, Summary, FULL_MODEL_PARAMS,
};
pub use model_file::{decode_params, encode_params, load_params, save_params};
pub use sim::{
    load_data, partition, run_late_join, run_late_join_with, run_pulse_probe, run_simulation,
    split_data, Federation, JoinSummary, LateJoinOutcome, Pulse, PulseOutcome, SimOutcome,
};

use crate::client::ClientError;
use crate::datastore::DataError;
use crate::nnkernel::KernelError;
use crate::server::ServerError;

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("evaluation: {0}")]
    Evaluation(String),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("model file: {0}")]
    Model(String),
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<OrchestratorError>,
    },
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
