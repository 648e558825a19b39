//! Crate-wide error type.

/// Errors raised by any rocpose component.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unbound graph input `{0}`")]
    UnboundInput(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("degenerate point configuration: {0}")]
    Degenerate(String),
    #[error("empty mask: {0}")]
    EmptyMask(String),
    #[error("insufficient correspondences: got {got} joint-valid pixels, need {need}")]
    InsufficientCorrespondences { got: usize, need: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("token index {index} out of range for codebook of size {size}")]
    TokenOutOfRange { index: usize, size: usize },
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },
    #[error("archive format error: {0}")]
    Archive(String),
    #[error("render error: {0}")]
    Render(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
