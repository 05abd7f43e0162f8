use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("label out of range at line {line}: {label} >= {num_classes}")]
    LabelOutOfRange {
        line: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("class {class} emptied by subsampling")]
    EmptyClass { class: usize },

    #[error("zero-norm vector: {0}")]
    ZeroNorm(String),

    #[error("missing oracle result for example `{0}`")]
    MissingQuery(String),

    #[error("query cache mismatch: {0}")]
    CacheMismatch(String),

    #[error("protocol error ({status}): {message}")]
    Protocol { status: String, message: String },

    #[error("transport failure: {0}")]
    Transport(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
