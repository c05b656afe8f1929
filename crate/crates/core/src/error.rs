use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CardError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CardError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config parse error: {0}")]
    ConfigParse(String),

    /// A configuration value is outside its admissible range. The key is named.
    #[error("invalid config key `{key}`: {message}")]
    ConfigRange { key: String, message: String },

    #[error("malformed input at line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("no sequences left after filtering")]
    EmptyCorpus,

    #[error("item universe too small: {available} candidate negatives, {requested} requested")]
    UniverseTooSmall { available: usize, requested: usize },

    #[error("diffusion step {step} outside [1, {max}]")]
    StepOutOfRange { step: usize, max: usize },

    #[error("non-finite loss at epoch {epoch} step {step}: {diagnostic}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        diagnostic: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("vocabulary hash mismatch: checkpoint has {expected}, data has {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CardError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CardError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn range(key: &str, message: impl Into<String>) -> Self {
        CardError::ConfigRange {
            key: key.to_string(),
            message: message.into(),
        }
    }
}
