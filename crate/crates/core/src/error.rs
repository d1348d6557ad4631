use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("policy error: {0}")]
    Policy(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("non-finite {term} loss at iteration {iteration}")]
    NonFinite { term: &'static str, iteration: usize },

    #[error("format version mismatch in {path}: found {found}, expected {expected}")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("truncated data file {path}: record {record} needs bytes up to {needed}, file has {len}")]
    Truncated {
        path: PathBuf,
        record: String,
        needed: u64,
        len: u64,
    },

    #[error("offset out of range in {path}: record {record} at byte {offset}, file has {len}")]
    OffsetOutOfRange {
        path: PathBuf,
        record: String,
        offset: u64,
        len: u64,
    },

    #[error("malformed container {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    /// Stable machine-readable class used by the command-line front end.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Parameter(_) => "parameter",
            Error::Schema(_) => "schema",
            Error::Policy(_) => "policy",
            Error::Corpus(_) => "corpus",
            Error::Numerical(_) | Error::NonFinite { .. } => "numerical",
            Error::VersionMismatch { .. } => "version",
            Error::Truncated { .. } => "truncated",
            Error::OffsetOutOfRange { .. } => "offset",
            Error::Malformed { .. } => "malformed",
            Error::Io { .. } => "io",
            Error::Tensor(_) => "tensor",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
