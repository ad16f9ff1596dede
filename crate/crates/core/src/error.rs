use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FedError>;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("zero-norm vector passed to {0}")]
    ZeroNorm(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("partition failed: {0}")]
    Partition(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("class {0} has no prototype")]
    AbsentClass(usize),

    #[error("{path}:{line}: {msg}")]
    Csv { path: PathBuf, line: u64, msg: String },

    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: String, expected: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl FedError {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        FedError::ShapeMismatch {
            op,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FedError::Io {
            path: path.into(),
            source,
        }
    }
}
