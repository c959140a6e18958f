use std::path::PathBuf;

use thiserror::Error;

use crate::matrix::ShapeMismatch;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid hyperparameters or strategy settings.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent dataset files.
    #[error("{}{}: {msg}", file.display(), line.map(|l| format!(":{l}")).unwrap_or_default())]
    Data {
        file: PathBuf,
        line: Option<usize>,
        msg: String,
    },

    #[error("{0}")]
    Shape(#[from] ShapeMismatch),

    /// Non-finite values, zero-norm rows and similar numeric breakdowns.
    #[error("numerical error: {0}")]
    Numeric(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("corrupt file {}: {msg}", path.display())]
    Corrupt { path: PathBuf, msg: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("epoch {epoch}: {source}")]
    Epoch {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn data(
        file: impl Into<PathBuf>,
        line: Option<usize>,
        msg: impl Into<String>,
    ) -> Self {
        Error::Data {
            file: file.into(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// The innermost error, skipping epoch wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Epoch { source, .. } => source.root(),
            other => other,
        }
    }
}
