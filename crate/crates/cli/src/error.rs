use stackfreight_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Solver(#[from] CoreError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 1 solver failure, 2 configuration, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver(e) => match e {
                CoreError::InvalidNetwork(_)
                | CoreError::NoPath { .. }
                | CoreError::UnknownArc(_)
                | CoreError::InfeasibleBlocking { .. }
                | CoreError::InvalidGrid(_)
                | CoreError::InvalidParameter(_) => 2,
                _ => 1,
            },
            CliError::Io(_) | CliError::Csv(_) | CliError::Json(_) => 3,
        }
    }
}
