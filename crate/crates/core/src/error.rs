//! Error surface shared by every module in the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by tensor math, layouts, models and the data pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A coordinate or index fell outside its valid range.
    #[error("index out of range: {0}")]
    Index(String),

    /// A hyperparameter or config value violates a structural invariant.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A scalar argument fell outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A tensor shape violates a contract (congruence, divisibility, channel count).
    #[error("shape error: {0}")]
    Shape(String),

    /// An operation produced NaN or Inf.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// A function under evaluation (e.g. in a gradient check) failed.
    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed file contents (tensor records, JSON sidecars, manifests).
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
