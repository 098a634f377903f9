use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch for `{operand}`: expected {expected}, got {got}")]
    Dimension {
        operand: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence too short: {steps} steps, need at least {min}")]
    SequenceTooShort { steps: usize, min: usize },

    #[error("label error: {0}")]
    Label(String),

    #[error("container parse error at byte {offset}: {kind}")]
    Parse { offset: usize, kind: ParseErrorKind },

    #[error("dataset validation failed:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("{} training run(s) failed:\n  {}", .0.len(), .0.join("\n  "))]
    RunsFailed(Vec<String>),

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("gradient oracle invalid: {0}")]
    OracleInvalid(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    BadMagic,
    UnsupportedVersion(u16),
    TruncatedHeader,
    DimensionOverflow,
    Truncated { expected: usize, got: usize },
    TrailingBytes(usize),
    NonFinite,
}

impl std::fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParseErrorKind::BadMagic => write!(f, "bad magic"),
            ParseErrorKind::UnsupportedVersion(v) => write!(f, "unsupported format version {v}"),
            ParseErrorKind::TruncatedHeader => write!(f, "truncated header"),
            ParseErrorKind::DimensionOverflow => write!(f, "dimension overflow"),
            ParseErrorKind::Truncated { expected, got } => {
                write!(f, "truncated payload: expected {expected} bytes, got {got}")
            }
            ParseErrorKind::TrailingBytes(n) => write!(f, "{n} trailing bytes after payload"),
            ParseErrorKind::NonFinite => write!(f, "non-finite value in payload"),
        }
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(operand: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            operand,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
