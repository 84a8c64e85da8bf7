use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or graph construction with incompatible dimensions.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An argument outside its documented domain (zero chunk size, k out of
    /// range, empty input where data is required, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A runtime contract was violated (label outside the class mask,
    /// backward on a non-scalar node, mismatched configs in one aggregate).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed dataset files.
    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
