use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no exact factorization of {size} into {n} factors >= 2")]
    NoFactorization { size: usize, n: usize },

    #[error("size {requested} exceeds cap of {cap}")]
    CapExceeded { requested: usize, cap: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Decoding failures for the on-disk formats. Each corruption class has its
/// own variant so callers (and tests) can tell them apart.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic at offset {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: usize,
        expected: [u8; 4],
        found: Vec<u8>,
    },

    #[error("unsupported dtype {0}")]
    UnsupportedDtype(u8),

    #[error("unknown network kind {0}")]
    UnknownKind(u8),

    #[error("truncated input: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: usize },

    #[error("rank chain broken: {0}")]
    RankChain(String),

    #[error("non-finite value at byte offset {offset}")]
    NonFinite { offset: usize },

    #[error("invalid header: {0}")]
    Header(String),
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Data(#[from] Error),
}

impl From<FormatError> for IoError {
    fn from(e: FormatError) -> Self {
        IoError::Data(Error::Format(e))
    }
}
