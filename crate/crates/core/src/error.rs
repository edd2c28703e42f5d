use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the tensor engine, the model and its file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("bad magic in {what}: expected {expected:?}, found {found:?}")]
    BadMagic {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { expected: u8, found: u8 },

    #[error("truncated {0}")]
    Truncated(&'static str),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("shape mismatch for parameter `{name}`: expected {expected:?}, found {found:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("unsupported image format: {0}")]
    Format(String),

    #[error("empty dataset at {0}")]
    EmptyDataset(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by reading or decoding external files.
    pub fn is_io_or_format(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::BadMagic { .. }
                | Error::Version { .. }
                | Error::Truncated(_)
                | Error::UnknownParameter(_)
                | Error::MissingParameter(_)
                | Error::ParameterShape { .. }
                | Error::Format(_)
                | Error::EmptyDataset(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
