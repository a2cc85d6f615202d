use tcsis_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    User(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// 1 for user errors, 2 when exact enumeration is infeasible, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(CoreError::Capacity { .. }) => 2,
            CliError::Core(CoreError::Degenerate(_) | CoreError::TrainingFailure(_) | CoreError::SamplingFailure(_)) => 3,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn user<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::User(msg.into()))
}
