//! Crate-wide error type.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents incompatible for the requested operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A sequence is shorter than the operation's minimum.
    #[error("sequence too short: got {got} frames, need at least {required}")]
    SequenceTooShort { got: usize, required: usize },

    /// A scalar argument is outside its admissible range.
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// Math domain violation (e.g. log of a nonpositive value).
    #[error("domain error in {op}: {reason}")]
    NumericDomain { op: &'static str, reason: String },

    /// A caller-side contract was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Class label outside the admissible range.
    #[error("label {got} out of range for {num_classes} classes")]
    InvalidLabel { got: usize, num_classes: usize },

    /// An emotion class has no samples where one is required.
    #[error("emotion class `{class}` absent from the source training set")]
    MissingClass { class: String },

    /// Bad configuration (unknown keys, unparsable values, invalid combinations).
    #[error("config error: {0}")]
    Config(String),

    /// Data ingestion failure, with the offending location.
    #[error("ingestion error at {location}: {cause}")]
    Ingestion { location: String, cause: String },

    /// Split protocol cannot be satisfied.
    #[error("split error: {0}")]
    Split(String),

    /// Training produced a non-finite quantity.
    #[error("divergence: {0}")]
    Divergence(String),

    /// Checkpoint serialization failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
