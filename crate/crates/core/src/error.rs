//! Crate-wide error type.

use std::path::PathBuf;

/// Errors raised anywhere in the unlearning pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A class identifier was not found where one was expected.
    #[error("unknown class `{0}`")]
    UnknownClass(String),

    /// A request, taxonomy or manifest failed validation.
    #[error("validation error: {0}")]
    Validation(String),

    /// The request selects an entire taxonomy level.
    #[error("degenerate request: {0}")]
    DegenerateRequest(String),

    /// A classification scope has fewer than two classes.
    #[error("degenerate class scope: need at least 2 classes, got {0}")]
    DegenerateScope(usize),

    /// Bad configuration value or unknown identifier.
    #[error("configuration error: {0}")]
    Config(String),

    /// Parameter shapes do not match.
    #[error("shape mismatch: expected {expected} parameters, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    /// Evaluation could not be carried out (empty split, zero baseline, ...).
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Training produced a non-finite loss.
    #[error("divergence at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    /// Checkpoint adapter does not know the declared format.
    #[error("unknown checkpoint format `{0}`")]
    UnknownFormat(String),

    /// A file could not be decoded.
    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end: 3 for
    /// divergence, 2 for everything else (bad input, missing files).
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Divergence { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
