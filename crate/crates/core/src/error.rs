use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    /// A precondition of an operation was violated (non-scalar loss,
    /// mismatched optimizer state, out-of-range step size, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration. The first field names the offending setting.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss is {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failure kinds when reading a checkpoint file. Loading never returns a
/// partially populated model.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint is truncated while reading {0}")]
    Truncated(&'static str),

    #[error("bad magic bytes {0:?}, expected \"HVAT\"")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint config is invalid: {0}")]
    InvalidConfig(String),

    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("parameter `{0}` is missing from the checkpoint")]
    MissingParameter(String),

    #[error("checkpoint contains unexpected parameter `{0}`")]
    UnexpectedParameter(String),

    #[error("checkpoint is malformed: {0}")]
    Malformed(String),

    #[error("{0} trailing bytes after the last entry")]
    TrailingBytes(usize),
}
