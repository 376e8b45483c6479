use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or sizes that do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Well-formed but unusable input (empty sets, too-short waveforms, ...).
    #[error("input error: {0}")]
    Input(String),

    /// An index outside its valid range, e.g. a class label.
    #[error("index error: {0}")]
    Index(String),

    /// A call-order or compatibility contract was violated.
    #[error("contract error: {0}")]
    Contract(String),

    /// A binary or text file did not match its expected layout.
    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    /// Manifest or config content error with a line number.
    #[error("{path}:{line}: {message}")]
    Load {
        path: PathBuf,
        line: usize,
        message: String,
    },

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
    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
