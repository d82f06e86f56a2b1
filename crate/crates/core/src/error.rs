use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed JSON. serde_json's message carries line and column.
    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("document {doc}: {message}")]
    Validation { doc: String, message: String },

    /// Labels in a corpus (or a checkpoint) that the active schema does not define.
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    /// A loss term became NaN or infinite during training.
    #[error("training diverged at epoch {epoch}, step {step}: loss term {term} is {value}")]
    Divergence {
        term: String,
        epoch: usize,
        step: usize,
        value: f64,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error(transparent)]
    Tensor(#[from] docie_autodiff::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(doc: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            doc: doc.into(),
            message: message.into(),
        }
    }
}
