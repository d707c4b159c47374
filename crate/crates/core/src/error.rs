use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum SpoError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("support mismatch: {0}")]
    SupportMismatch(String),
    #[error("unknown preference dimension `{0}`")]
    UnknownDimension(String),
    #[error("log-probability cache has no round {round}")]
    MissingCacheRound { round: usize },
    #[error("cache fingerprint {found} does not match dataset fingerprint {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("sequence of length {len} exceeds context length {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, SpoError>;

impl SpoError {
    /// True when the error comes from bad inputs (arguments, configuration
    /// or files) rather than from a failure during computation.
    pub fn is_input_error(&self) -> bool {
        match self {
            SpoError::NonFinite(_) | SpoError::NonFiniteLoss { .. } | SpoError::Csv(_) => false,
            SpoError::Io(e) => e.kind() == std::io::ErrorKind::NotFound,
            _ => true,
        }
    }
}
