use thiserror::Error;

/// Errors surfaced by the engine.
///
/// Every error that originates inside the network forward pass carries the
/// canonical layer path of the offending node so callers can locate it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("concat input {index}: batch/height/width {got} does not match {expected}")]
    ConcatMismatch {
        index: usize,
        expected: String,
        got: String,
    },

    #[error("{context}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("{context}: length mismatch, expected {expected}, got {got}")]
    LengthMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("{context}: {message}")]
    InvalidSpec { context: String, message: String },

    #[error("unbound weight `{name}`")]
    MissingParam { name: String },

    #[error("weight store holds entries not used by the graph: {}", names.join(", "))]
    UnexpectedParams { names: Vec<String> },

    #[error("weight `{name}`: expected shape {expected}, got {got}")]
    ParamShape {
        name: String,
        expected: String,
        got: String,
    },

    #[error("duplicate weight name `{name}`")]
    DuplicateParam { name: String },

    #[error("weight file: {0}")]
    WeightFile(String),

    #[error("weight file is truncated")]
    Truncated,

    #[error("weight file: unknown format version {0}")]
    UnknownVersion(u32),

    #[error("image: unsupported format `{0}` (want binary P6)")]
    UnsupportedImage(String),

    #[error("image: {0}")]
    MalformedImage(String),

    #[error("label id {id} out of range 0..{limit}")]
    LabelOutOfRange { id: u32, limit: u32 },

    #[error("footprint probe input of {pixels} pixels exceeds the cap of {cap}")]
    ProbeTooLarge { pixels: usize, cap: usize },

    #[error("{0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub(crate) fn spec(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidSpec {
            context: context.into(),
            message: message.into(),
        }
    }
}
