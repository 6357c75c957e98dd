use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),
    #[error("dataset file {path}: {reason}")]
    CorruptDataset { path: PathBuf, reason: String },
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("partition retry budget of {retries} exhausted: some client kept receiving no samples (alpha too small for this many clients?)")]
    RetryBudgetExhausted { retries: usize },
    #[error("unknown architecture `{0}`")]
    UnknownArch(String),
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("model {0} is frozen")]
    Frozen(usize),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("generator loss diverged at iteration {iteration}: {loss}")]
    Divergent { iteration: usize, loss: f64 },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("duplicate metric key (run {run_id}, epoch {epoch}, {name})")]
    DuplicateMetric {
        run_id: String,
        epoch: u64,
        name: String,
    },
    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),
    #[error("epoch {epoch}: {source}")]
    AtEpoch {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("png encoding: {0}")]
    Png(#[from] png::EncodingError),
}

impl Error {
    pub fn at_epoch(self, epoch: usize) -> Self {
        Error::AtEpoch {
            epoch,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
