use thiserror::Error;

/// Errors produced by the sampling library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The state space is too large to enumerate.
    #[error("state space of {states} states exceeds the enumeration cap of {cap}")]
    Capacity { states: f64, cap: u64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// An operation was invoked with bookkeeping that does not belong to it.
    #[error("state error: {0}")]
    State(String),

    #[error("training failure: {0}")]
    TrainingFailure(String),

    #[error("sampling failure: {0}")]
    SamplingFailure(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
