use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("structural mismatch: {0}")]
    Structure(String),

    #[error("missing teacher embedding for {0}")]
    MissingEmbedding(String),

    #[error("non-finite loss term {term} at step {step}: {value}")]
    NonFinite { term: &'static str, step: u64, value: f64 },

    #[error("unsupported format version {found} (expected {expected}) in {what}")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("external command failed: {0}")]
    External(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }

    /// Short stable tag for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Structure(_) => "structure",
            Error::MissingEmbedding(_) => "missing_embedding",
            Error::NonFinite { .. } => "non_finite",
            Error::Version { .. } => "version",
            Error::Format(_) => "format",
            Error::Image(_) => "image",
            Error::Tensor(_) => "tensor",
            Error::External(_) => "external",
        }
    }

    /// Configuration problems map to the usage exit code.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
