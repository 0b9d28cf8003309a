use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Core(#[from] drscreen_core::Error),

    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: u64, message: String },

    #[error("referential integrity: {0}")]
    Integrity(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl EvalError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EvalError::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<PathBuf>, line: u64, message: impl Into<String>) -> Self {
        EvalError::Parse { path: path.into(), line, message: message.into() }
    }

    /// Process exit code: 2 for invalid input, 3 for an undefined metric,
    /// 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        use drscreen_core::Error as C;
        match self {
            EvalError::Core(C::UndefinedMetric(_)) => 3,
            EvalError::Io { .. } => 1,
            EvalError::Core(_) | EvalError::Parse { .. } | EvalError::Integrity(_) | EvalError::Config(_) => 2,
        }
    }
}
