use thiserror::Error;

/// Errors produced anywhere in the kit.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor axis did not have the expected extent.
    #[error("{axis} mismatch: expected {expected}, got {got} ({context})")]
    DimMismatch {
        axis: &'static str,
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate channel: leave-one-out moments need at least two neurons per channel")]
    DegenerateChannel,

    #[error("value {0} is not on this tape")]
    UnknownValue(usize),

    #[error("loss must be a scalar, got {0} elements")]
    NonScalarLoss(usize),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("graph error at node {node}: {message}")]
    Graph { node: usize, message: String },

    #[error("attention index {index} out of range (graph has {len} nodes)")]
    AttentionIndex { index: usize, len: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unsupported saliency layer: {0}")]
    UnsupportedLayer(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
