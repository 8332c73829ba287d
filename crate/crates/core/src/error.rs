use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Non-finite gradient or loss while fitting a network. `layer` is the
    /// index of the offending parameter tensor pair (trunk layers first, then
    /// the mean head and the variance head), or `usize::MAX` for the loss itself.
    #[error("training fault in layer {layer}: {reason}")]
    TrainingFault { layer: usize, reason: String },

    #[error("environment fault: {0}")]
    Environment(String),

    #[error("planning failed: {0}")]
    Planning(String),

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

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
