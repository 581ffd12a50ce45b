use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("bad JSON: {0}")]
    Json(#[from] serde_json::Error),

    /// Every median is zero or negative: exact recovery, no rate to fit.
    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Core(#[from] replora_core::Error),
}

impl CliError {
    /// 2 for usage problems, 3 for I/O, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Json(_) => 2,
            CliError::Core(replora_core::Error::Argument(_)) => 2,
            CliError::Io(_) | CliError::Csv(_) | CliError::Core(replora_core::Error::Io(_)) => 3,
            _ => 1,
        }
    }
}
