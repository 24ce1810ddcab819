use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("root was not recorded on a taping tape")]
    Untaped,

    #[error("custom gradient for input {input} has shape {got:?}, expected {expected:?}")]
    CustomGradShape {
        input: usize,
        got: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate layer: {0}")]
    DegenerateLayer(String),

    #[error("binary packing requires nonzero codes, found 0 at index {0}")]
    ZeroCodeInBinary(usize),

    #[error("reserved ternary bit pattern 0b11 at weight index {0}")]
    ReservedPattern(usize),

    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error("dataset error in {path}: {detail}")]
    Dataset { path: String, detail: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
