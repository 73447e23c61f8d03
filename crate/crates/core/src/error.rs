use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("index {index} out of range for vocabulary of size {vocab}")]
    Index { index: usize, vocab: usize },

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("domain `{0}` is empty after filtering")]
    EmptyDomain(String),

    #[error("empty batch: no predictable positions")]
    EmptyBatch,

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("round {round}, client {client}: {message}")]
    ClientAbort {
        round: usize,
        client: usize,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
