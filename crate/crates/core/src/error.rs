use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: header declares {expected} values, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("sample rate must be positive, got {0}")]
    NonPositiveSampleRate(f64),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid annotation on line {line}: {reason}")]
    InvalidAnnotation { line: usize, reason: String },
    #[error("event at {start_s} s lasting {duration_s} s exceeds record duration {record_s} s")]
    EventOutOfBounds {
        start_s: f64,
        duration_s: f64,
        record_s: f64,
    },
    #[error("sample rate {0} Hz is below 10 Hz")]
    RateTooLow(f64),
    #[error("degenerate signal: clipped standard deviation {0:e}")]
    DegenerateSignal(f64),
    #[error("record too short: {duration_s} s, need at least {required_s} s")]
    RecordTooShort { duration_s: f64, required_s: f64 },
    #[error("synthetic config infeasible: {0}")]
    ConfigInfeasible(String),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("validation set must contain both classes")]
    DegenerateValidationSet,
    #[error("cascade stalled at stage {stage}: removed {removed} of {pool} epochs")]
    CascadeStalled {
        stage: usize,
        removed: usize,
        pool: usize,
    },
    #[error("sleep hours must be positive")]
    ZeroSleepHours,
    #[error("scores need both positive and negative labels")]
    SingleClassInput,
    #[error("degenerate regression design: {0}")]
    DegenerateDesign(String),
    #[error("no reference annotations for record {0}")]
    MissingReference(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::ConfigInfeasible(_) => ErrorKind::Config,
            Error::DegenerateDesign(_)
            | Error::NonFinite(_)
            | Error::CascadeStalled { .. }
            | Error::DegenerateValidationSet
            | Error::SingleClassInput => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}
