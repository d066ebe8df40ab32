use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// The tape (or another stateful object) was used out of order.
    #[error("state error: {0}")]
    State(String),

    #[error("unknown parameter `{0}`")]
    Lookup(String),

    /// A scalar argument or configuration value is out of range.
    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at step {step} (lr {lr:e}, max |grad| {max_grad:e})")]
    Diverged { step: usize, lr: f64, max_grad: f64 },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
