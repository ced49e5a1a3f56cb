use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while decoding or validating a tensor container.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported container version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("truncated payload: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("manifest/tensor length disagreement: {0}")]
    LengthMismatch(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("no adapter provides layer {0:?}")]
    MissingLayer(String),
    #[error("layer {0:?} is not in the encoder catalog")]
    UnknownLayer(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Format(FormatError::Shape(msg.into()))
    }
}
