use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible. `detail` names every shape involved.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("weight container: {0}")]
    Container(String),

    #[error("layer `{layer}` is not foldable: {reason}")]
    NotFoldable { layer: String, reason: String },

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("expected {expected} noise tensors (sites: {sites}), got {got}")]
    NoiseCount { expected: usize, got: usize, sites: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png encoding: {0}")]
    Png(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        detail: detail.into(),
    }
}
