use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("leakage guard tripped: {0}")]
    Leakage(String),
    #[error("provenance mismatch: {0}")]
    Provenance(String),
    #[error("vocabulary mismatch: expected {expected}, found {found}")]
    VocabularyMismatch { expected: String, found: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl Error {
    /// Stable short name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Config(_) => "config",
            Error::Shape { .. } => "shape",
            Error::Parse { .. } => "parse",
            Error::Leakage(_) => "leakage",
            Error::Provenance(_) => "provenance",
            Error::VocabularyMismatch { .. } => "vocabulary_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::Invalid(_) => "invalid",
            Error::Json(_) => "json",
        }
    }
}
