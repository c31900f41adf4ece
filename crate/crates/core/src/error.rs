use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("index {index} out of range for {what} of length {len}")]
    Index { what: &'static str, index: usize, len: usize },

    #[error("operation requires {expected} classes, model has {actual}")]
    Arity { expected: usize, actual: usize },

    #[error("unsupported spline degree {0}: derivatives need degree >= 1")]
    UnsupportedDegree(usize),

    #[error("stratification failed: {0}")]
    Stratification(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    TrainingFailed {
        epoch: usize,
        /// Flattened parameters from the last epoch with a finite loss.
        last_finite: Vec<f64>,
    },

    #[error("metric is undefined: {0}")]
    UndefinedMetric(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("unsupported bundle format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt model bundle {path}: {reason}")]
    CorruptBundle { path: PathBuf, reason: String },

    #[error("formula parse error at byte {pos}: {msg}")]
    FormulaParse { pos: usize, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(expected: usize, actual: usize) -> Self {
        Error::Shape { expected, actual }
    }
}
