use thiserror::Error;

/// Errors raised anywhere in the training engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("parameter `{0}` not found in store")]
    MissingParam(String),

    #[error("invalid sub-network {spec}: {reason}")]
    InvalidSpec { spec: String, reason: String },

    #[error("cannot shrink from {from} to {to}")]
    Shrink { from: String, to: String },

    #[error("MoGrow needs a momentum network but none was supplied")]
    MissingMomentum,

    #[error("{0} is not a member of the stage growth space")]
    NotInSpace(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("schedule: {0}")]
    Schedule(String),

    #[error("search: {0}")]
    Search(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
