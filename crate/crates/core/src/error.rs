use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("line {line}: label out of range: {label} is not a valid {task} label")]
    LabelOutOfRange {
        line: usize,
        label: i64,
        task: crate::corpus::Task,
    },

    #[error("inconsistent embedding dimension: expected {expected}, found {found} ({context})")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        context: String,
    },

    #[error("line {line}: preference record missing second item")]
    MissingSecondItem { line: usize },

    #[error("stratum {stratum} has {items} item(s); {reason}")]
    StratumTooSmall {
        stratum: String,
        items: usize,
        reason: String,
    },

    #[error("unknown cluster id {0:?}")]
    UnknownCluster(String),

    #[error("cluster index {index} out of range for {k} clusters")]
    ClusterIndexOutOfRange { index: usize, k: usize },

    #[error("task mismatch: {left} vs {right}")]
    TaskMismatch {
        left: crate::corpus::Task,
        right: crate::corpus::Task,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged {
        epoch: usize,
        last_good: Box<crate::model::ModelParams>,
    },

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
