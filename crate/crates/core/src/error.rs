use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("missing field `{field}` at line {line}")]
    MissingField { line: usize, field: &'static str },

    #[error("image for block `{block}` not found at {}", path.display())]
    UnresolvableImage { block: String, path: PathBuf },

    #[error("gateway error: {0}")]
    Gateway(String),

    #[error("gateway call timed out: {0}")]
    Timeout(String),

    #[error("malformed model output: {0}")]
    MalformedVerdict(String),

    #[error("unknown tree node `{0}`")]
    UnknownNode(String),

    #[error("unknown entity {0}")]
    UnknownEntity(u64),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("extraction for node `{0}` returned nothing")]
    EmptyExtraction(String),

    #[error("document has no blocks")]
    EmptyDocument,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("verdicts do not cover block `{0}`")]
    MissingVerdict(String),

    #[error("plan does not conform to its template: {0}")]
    PlanValidation(String),

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("no section matched the model's selection")]
    NoSectionSelected,

    #[error("node `{0}` is missing a score")]
    MissingScore(String),

    #[error("gold evidence set is empty")]
    EmptyGold,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("index format version {found} is newer than supported {supported}")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("corrupt index: {0}")]
    CorruptIndex(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Broad failure class, used for process exit codes and the C error codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Gateway,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Gateway(_) | Error::Timeout(_) => ErrorClass::Gateway,
            Error::InvalidConfig(_) => ErrorClass::Usage,
            _ => ErrorClass::Data,
        }
    }
}
