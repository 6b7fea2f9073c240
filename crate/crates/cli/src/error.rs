use std::path::PathBuf;

use thiserror::Error;

/// Exit status contract: 0 success, 1 validation, 2 numerical, 3 assertion.
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_ASSERTION: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] pidssl::Error),

    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stale input {path}: recorded hash {recorded}, file on disk hashes to {found}")]
    Stale {
        path: PathBuf,
        recorded: String,
        found: String,
    },

    #[error("missing input {path}; run `{stage}` first")]
    MissingInput { path: PathBuf, stage: &'static str },

    #[error("{0}")]
    Usage(String),

    #[error("assertion failed: {0}")]
    Assertion(String),
}

impl From<ndcore::NdError> for CliError {
    fn from(e: ndcore::NdError) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(pidssl::Error::Numerical { .. } | pidssl::Error::Divergence { .. }) => {
                EXIT_NUMERICAL
            }
            CliError::Assertion(_) => EXIT_ASSERTION,
            _ => EXIT_VALIDATION,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
