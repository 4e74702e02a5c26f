//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("{file}: {msg}")]
    Format { file: String, msg: String },

    #[error("sampling: {0}")]
    Sampling(String),

    #[error("numeric error in layer {layer}: {msg}")]
    Numeric { layer: usize, msg: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: {msg}")]
    Training {
        epoch: usize,
        batch: usize,
        msg: String,
    },

    #[error("encoding scheme: {0}")]
    Scheme(String),

    #[error("key generation: {0}")]
    Keygen(String),

    #[error("no surviving key candidates for bit indices {bit_indices:?}")]
    KeygenNoSurvivors { bit_indices: Vec<usize> },

    #[error("embedding: {0}")]
    Embedding(String),

    #[error("verification: {0}")]
    Verification(String),

    #[error("attack: {0}")]
    Attack(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// CLI exit code for this error: 2 for usage/config problems, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 2,
            _ => 3,
        }
    }
}
