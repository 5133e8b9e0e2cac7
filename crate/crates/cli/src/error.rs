use songdemand_core::DemandError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    /// Bad input: malformed files, unknown columns, out-of-domain values.
    #[error("{0}")]
    Validation(String),

    #[error("not found: {0}")]
    NotFound(String),

    /// The store already holds a different document under this id, or
    /// another writer holds the lock.
    #[error("conflict: {0}")]
    Conflict(String),

    #[error(transparent)]
    Model(#[from] DemandError),

    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Internal(String),
}

pub type AppResult<T> = Result<T, AppError>;

impl AppError {
    pub fn is_validation(&self) -> bool {
        match self {
            AppError::Validation(_) | AppError::NotFound(_) | AppError::Conflict(_) => true,
            AppError::Model(e) => !matches!(e, DemandError::Fit { .. } | DemandError::DegenerateFit(_)),
            AppError::Io(_) | AppError::Internal(_) => false,
        }
    }

    /// 1 for anything the caller can fix by changing its input, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.is_validation() {
            1
        } else {
            2
        }
    }

    pub fn http_status(&self) -> u16 {
        match self {
            AppError::NotFound(_) => 404,
            AppError::Conflict(_) => 409,
            AppError::Io(_) | AppError::Internal(_) => 500,
            AppError::Model(DemandError::Fit { .. } | DemandError::DegenerateFit(_)) => 500,
            _ => 400,
        }
    }

    /// Message safe to show a remote client.
    pub fn public_message(&self) -> String {
        match self {
            AppError::Io(_) | AppError::Internal(_) => "internal error".into(),
            other => other.to_string(),
        }
    }
}

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            AppError::Internal(e.to_string())
        } else {
            AppError::Validation(format!("invalid JSON: {e}"))
        }
    }
}

impl From<csv::Error> for AppError {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            AppError::Internal(e.to_string())
        } else {
            AppError::Validation(format!("invalid CSV: {e}"))
        }
    }
}
