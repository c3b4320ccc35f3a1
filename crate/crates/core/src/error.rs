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

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("unknown relation `{0}`")]
    UnknownRelation(String),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("backward called without a recorded forward computation: {0}")]
    NoForward(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("sample {index} needs {needed} slots but only {max} are available")]
    SlotOverflow { index: usize, needed: usize, max: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("missing embedding vector for `{0}`")]
    MissingVector(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
