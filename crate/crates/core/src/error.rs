use std::path::PathBuf;

/// Crate-wide error type. Variants carry enough context that the CLI can
/// print a single actionable line and exit nonzero.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cloud invariant violated: {0}")]
    InvalidCloud(String),

    #[error("checkpoint version {found} not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupted file {path}: {reason}")]
    Corrupted { path: PathBuf, reason: String },

    #[error("dataset at {root} is incomplete: missing {missing}")]
    IncompleteDataset { root: PathBuf, missing: String },

    #[error("dataset schema version {found} not supported (expected {expected})")]
    DatasetVersion { found: u32, expected: u32 },

    #[error("operation would leave an empty cloud: {0}")]
    EmptyCloud(String),

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: u64, detail: String },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
