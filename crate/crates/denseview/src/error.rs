//! Crate-wide error type.
//!
//! Variants group by failure class so the CLI can map them onto stable exit
//! codes (config → 2, data/io → 3, numerical → 4, external scorer → 5).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("unsupported op: {0}")]
    UnsupportedOp(String),

    #[error("non-finite values produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("autodiff error: {0}")]
    Autodiff(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("external scorer error: {0}")]
    Scorer(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Exit code used by the command-line frontend for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnsupportedOp(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::NonFinite { .. } | Error::Numerical(_) | Error::Shape(_) | Error::Autodiff(_) => 4,
            Error::Scorer(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
