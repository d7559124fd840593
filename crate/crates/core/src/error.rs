use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("truncated input: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("unsupported skeleton: {0}")]
    UnsupportedSkeleton(String),
    #[error("unknown interaction class `{0}`")]
    UnknownClass(String),
    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("tokenizer checkpoint mismatch: transformer expects {expected}, got {found}")]
    TokenizerMismatch { expected: String, found: String },
    #[error("mode mismatch: {0}")]
    ModeMismatch(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable category, used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::BadMagic { .. } => "bad_magic",
            Error::Truncated { .. } => "truncated",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::InvalidInput(_) | Error::NonFinite(_) | Error::IndexOutOfRange { .. } => "invalid_input",
            Error::UnsupportedSkeleton(_) => "unsupported_skeleton",
            Error::UnknownClass(_) => "unknown_class",
            Error::Config(_) | Error::Json(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::TokenizerMismatch { .. } => "tokenizer_mismatch",
            Error::ModeMismatch(_) => "mode_mismatch",
            Error::Diverged { .. } => "diverged",
            Error::Io(_) => "io",
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
