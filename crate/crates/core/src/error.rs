use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure in {context}")]
    Numerical { context: String },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("pool has {available} available pairs, a batch needs {required}")]
    InsufficientPool { required: usize, available: usize },

    #[error("{what} mismatch: expected {expected}, found {found}")]
    Mismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("rank-deficient design: {0}")]
    Unidentifiable(String),

    #[error(transparent)]
    Nd(#[from] ndcore::NdError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn numerical(context: impl Into<String>) -> Error {
    Error::Numerical {
        context: context.into(),
    }
}
