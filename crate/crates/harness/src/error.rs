use m3esr_core::Error as CoreError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    /// Evaluation data overlaps the split a checkpoint was trained on.
    #[error("contamination: {0}")]
    Contamination(String),

    #[error(transparent)]
    Core(CoreError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<CoreError> for HarnessError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(m) => HarnessError::Config(m),
            CoreError::Lookup { kind, name } => HarnessError::Config(format!("unknown {kind}: {name}")),
            other => HarnessError::Core(other),
        }
    }
}

impl HarnessError {
    /// 2 for configuration problems, 3 for violated contracts, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Contamination(_) => 3,
            HarnessError::Core(
                CoreError::Dimension { .. }
                | CoreError::Domain(_)
                | CoreError::Contract(_)
                | CoreError::InsufficientData { .. }
                | CoreError::Mode(_),
            ) => 3,
            _ => 1,
        }
    }
}
