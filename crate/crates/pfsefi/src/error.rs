use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("tracking failure at step {step}: {reason}")]
    TrackingFailure { step: usize, reason: String },

    #[error("oracle check failed: {0}")]
    OracleFailure(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error at line {line}: {msg}")]
    Dataset { line: usize, msg: String },

    #[error("autodiff error: {0}")]
    Autodiff(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code contract: 0 success, 2 config error,
    /// 3 tracking-failure abort, 4 oracle failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::Dataset { .. } => 2,
            Error::TrackingFailure { .. } => 3,
            Error::OracleFailure(_) => 4,
            Error::Checkpoint(_) | Error::Autodiff(_) | Error::Io(_) => 2,
        }
    }
}
