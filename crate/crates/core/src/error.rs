use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A forward pass produced NaN or Inf.
    #[error("non-finite activation in {stage} layer {layer}")]
    NonFiniteActivation { stage: &'static str, layer: usize },

    /// A loss term evaluated to NaN or Inf.
    #[error("non-finite loss term `{0}`")]
    NonFiniteLoss(&'static str),

    /// The projection output collapsed to the zero vector before normalization.
    #[error("degenerate embedding: {0}")]
    Degenerate(String),

    #[error("training diverged at step {step}; last good checkpoint: {last_good}")]
    Diverged { step: u64, last_good: String },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
