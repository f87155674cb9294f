use alloc::string::String;

/// Errors raised by the core numerical and routing machinery.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("empty expert selection")]
    EmptySelection,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("top-k of {k} requested from {m} experts")]
    TopK { k: usize, m: usize },
    #[error("routing mask has {found} selected experts, expected {expected}")]
    MaskPopulation { expected: usize, found: usize },
    #[error("trace does not match sequence")]
    TraceMismatch,
    #[error("degenerate probability")]
    DegenerateProbability,
    #[error("degenerate importance ratio")]
    DegenerateRatio,
    #[error("sequence of length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("decode error at byte {offset}: {reason}")]
    Decode { offset: usize, reason: &'static str },
    #[error("cached masks for position {position} conflict with stored entry")]
    ConflictingMasks { position: usize },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
