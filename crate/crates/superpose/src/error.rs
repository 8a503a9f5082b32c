use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("format: {0}")]
    Format(String),
    #[error("dtype: {0}")]
    Dtype(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Format(_) | Error::Dtype(_) | Error::Schema(_) | Error::Shape(_) | Error::Io { .. } => 2,
            Error::Numeric(_) => 3,
        }
    }
}

impl From<superpose_core::Error> for Error {
    fn from(e: superpose_core::Error) -> Self {
        match e {
            superpose_core::Error::Shape(m) => Error::Shape(m),
            superpose_core::Error::Numeric(m) => Error::Numeric(m),
            superpose_core::Error::Config(m) => Error::Config(m),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
