use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffnetError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("loss must be a 1x1 scalar, got {shape:?}")]
    NonScalarLoss { shape: (usize, usize) },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DiffnetError> = std::result::Result<T, E>;
