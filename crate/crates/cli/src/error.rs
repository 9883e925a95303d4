use thiserror::Error;
use tpnica::NicaError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] NicaError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 3 for numerical failures, 2 for everything a user can fix by input.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(
                NicaError::NotPositiveDefinite { .. }
                | NicaError::NonFinite(_)
                | NicaError::NoConvergence(_)
                | NicaError::ZeroVariance(_),
            ) => 3,
            _ => 2,
        }
    }
}
