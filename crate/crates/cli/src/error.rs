use slice_core::SliceError;
use thiserror::Error;

/// CLI-level failures, mapped onto process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("runtime failure in {failed} of {total} cells")]
    CellFailures { failed: usize, total: usize },

    #[error(transparent)]
    Core(#[from] SliceError),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit codes: 1 config error, 2 runtime failure in >= 1 cell,
    /// 3 combinatorial budget refusal.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::CellFailures { .. } => 2,
            CliError::Core(SliceError::BudgetExceeded { .. }) => 3,
            CliError::Core(_) | CliError::Io { .. } => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
