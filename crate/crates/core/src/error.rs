use std::path::PathBuf;

/// Errors produced anywhere in the lifting pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),

    #[error("backward: {0}")]
    Backward(String),

    #[error("gradient check: function is not deterministic ({0})")]
    NonDeterministic(String),

    #[error("invalid skeleton: {0}")]
    Skeleton(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite activation after block {block}")]
    NonFiniteActivation { block: usize },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("joint {joint} at frame {frame} is behind the camera (z = {z})")]
    BehindCamera { frame: usize, joint: usize, z: f64 },

    #[error("sequence `{name}` has {frames} frames but the window needs {window}")]
    SequenceTooShort { name: String, frames: usize, window: usize },

    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("invalid sequence: {0}")]
    Sequence(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}
