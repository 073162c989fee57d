use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-facing configuration (parameters, presets, schedules, JSON).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("kernel {kind} overflowed at distance {distance}")]
    KernelOverflow { kind: String, distance: usize },

    #[error("non-finite attention logit in head {head}, row {row}")]
    Numeric { head: usize, row: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("resource cap exceeded: {requested} cells requested, cap is {cap}")]
    ResourceCap { requested: u128, cap: u128 },

    #[error("insufficient held-out data: need {required} tokens, have {available}")]
    InsufficientData { required: usize, available: usize },

    #[error("training diverged: loss is NaN at step {step}")]
    Diverged { step: usize },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether this error stems from the filesystem rather than from inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
