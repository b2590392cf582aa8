use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DhmdError {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json at {path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid sample {sample_id}: {reason}")]
    InvalidSample { sample_id: String, reason: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("sample {sample} in batch has no valid {what} timesteps")]
    FullyMasked { sample: usize, what: String },

    #[error("non-finite loss at epoch {epoch}, step {step}: {components}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        components: String,
    },

    #[error("empty split: {0}")]
    EmptySplit(String),
}

impl DhmdError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DhmdError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DhmdError>;
