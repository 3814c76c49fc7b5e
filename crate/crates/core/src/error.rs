//! Crate-wide error type.

/// Errors surfaced by tensor ops, network construction, data handling and
/// the training loop.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A structural problem: mismatched shapes, invalid layer names, bad
    /// hyperparameters. Fixable by changing the configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API misuse: calling operations in the wrong order or with
    /// inputs that do not belong together.
    #[error("usage error: {0}")]
    Usage(String),

    /// A malformed input file.
    #[error("parse error in {file}, line {line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    /// A numerical failure during training or checking (NaN loss, failed
    /// gradient check).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
