use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("non-finite loss or gradient at local iteration {iteration}")]
    Diverged { iteration: u64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown model kind `{0}`")]
    UnknownKind(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("duplicate contribution from client {0}")]
    DuplicateClient(u32),

    #[error("operation requires privacy mode `{expected}`")]
    WrongMode { expected: &'static str },

    #[error("snapshot format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn mismatch(expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch { expected, actual }
    }
}
