use thiserror::Error;

/// Errors raised across the library and the CLI.
#[derive(Debug, Error)]
pub enum QepError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// The quadratic form vanished (u = µ or Y = 0) where the density has a
    /// singularity for q < 2.
    #[error("singular density: {0}")]
    SingularDensity(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("unsupported kernel family for closed-form psi statistics: {0}")]
    UnsupportedFamily(String),
    #[error("non-finite gradient in field `{field}`")]
    GradientFailure { field: String },
    #[error("training diverged: non-finite loss for {0} consecutive steps")]
    TrainingDiverged(usize),
    #[error("ingestion error at row {row}: {msg}")]
    Ingestion { row: usize, msg: String },
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl QepError {
    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            QepError::Config(_) | QepError::InvalidArgument(_) | QepError::UnsupportedFamily(_) => 2,
            QepError::SingularDensity(_)
            | QepError::NumericalFailure(_)
            | QepError::GradientFailure { .. }
            | QepError::TrainingDiverged(_) => 3,
            QepError::Ingestion { .. } | QepError::Evaluation(_) | QepError::Io(_) | QepError::Serde(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, QepError>;

pub(crate) fn invalid(msg: impl Into<String>) -> QepError {
    QepError::InvalidArgument(msg.into())
}
