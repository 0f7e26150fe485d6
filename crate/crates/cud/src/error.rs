use std::io;
use std::path::PathBuf;

use cud_core::ErrorClass;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] cud_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{context}: {source}")]
    Json { context: String, source: serde_json::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("stage `{needed}` must run first (missing {path})")]
    Dependency { needed: &'static str, path: PathBuf },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("run directory is locked by another process ({0})")]
    Locked(PathBuf),
}

pub type AppResult<T> = Result<T, AppError>;

impl AppError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Core(e) => match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
                ErrorClass::Degenerate => 5,
            },
            AppError::Config(_) => 2,
            AppError::Io { .. }
            | AppError::Json { .. }
            | AppError::Csv(_)
            | AppError::Dependency { .. }
            | AppError::Format { .. }
            | AppError::Locked(_) => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> AppError {
        let path = path.into();
        move |source| AppError::Io { path, source }
    }

    pub(crate) fn json(context: impl Into<String>) -> impl FnOnce(serde_json::Error) -> AppError {
        let context = context.into();
        move |source| AppError::Json { context, source }
    }
}
