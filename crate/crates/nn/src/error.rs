use pdo3d_core::CoreError;
use thiserror::Error;

pub type Result<T, E = NnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("field mismatch: {0}")]
    Field(String),

    #[error("{op} is not admissible for field {field}: {reason}")]
    Admissibility {
        op: &'static str,
        field: String,
        reason: &'static str,
    },

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
