use std::path::PathBuf;

/// Failures of the command-line layer, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] fcmfwi_core::Error),
}

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Self::Format { path: path.into(), message: message.into() }
    }

    /// 1 for configuration problems, 2 for numerical and output failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } | Self::Invalid(_) => 1,
            Self::Core(e) if !e.is_numerical() => 1,
            _ => 2,
        }
    }
}

pub type AppResult<T> = std::result::Result<T, AppError>;
