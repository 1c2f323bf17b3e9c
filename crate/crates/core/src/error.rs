use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A network, layer or training configuration violates its invariants.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid user input (empty expression, unknown parameter name, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A NaN or infinity appeared in a computed value.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    /// Scene rejection sampling gave up.
    #[error("generation error: {0}")]
    Generation(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("format version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
