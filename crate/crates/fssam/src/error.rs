//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes of the matching pipeline and its file formats.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands were expected to share a shape but do not.
    #[error("shape mismatch: {context} (expected {expected}, got {actual})")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// A tensor was constructed with inconsistent dimensions or data length.
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    /// A value violated a domain invariant (non-finite, out of range).
    #[error("invalid value: {0}")]
    InvalidValue(String),

    /// A mask with zero total weight was used where a weighted mean is required.
    #[error("degenerate mask: {0}")]
    DegenerateMask(&'static str),

    /// A mask that must be binary contains a value other than 0 or 1.
    #[error("mask is not binary: value {value} at index {index}")]
    MaskNotBinary { index: usize, value: f32 },

    /// An operation over a collection was given an empty one.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// Cross attention calibration requires at least one support memory.
    #[error("missing support: at least one support memory is required")]
    MissingSupport,

    /// A synthetic data specification cannot be realised.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// A configuration file failed validation.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A feature file does not start with the expected magic bytes.
    #[error("bad magic: expected \"FSSF\", got {0:?}")]
    BadMagic([u8; 4]),

    /// A feature file declares a format version this build does not read.
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),

    /// A feature file declares an unknown payload kind.
    #[error("unknown payload kind {0}")]
    UnknownKind(u16),

    /// A feature file payload is shorter than its header promises.
    #[error("truncated payload: expected {expected} bytes, got {actual}")]
    TruncatedPayload { expected: usize, actual: usize },

    /// A feature file payload is longer than its header promises.
    #[error("trailing data: expected {expected} bytes, got {actual}")]
    TrailingData { expected: usize, actual: usize },

    /// A mask file holds a value outside [0, 1].
    #[error("mask range violation: value {value} at index {index}")]
    MaskRangeViolation { index: usize, value: f32 },

    /// A feature file holds a non-finite value.
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    /// An error raised while processing one episode of a batch.
    #[error("episode {index}: {source}")]
    InEpisode {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Tag an error with the index of the episode it occurred in.
    pub fn in_episode(self, index: usize) -> Error {
        Error::InEpisode {
            index,
            source: Box::new(self),
        }
    }
}
