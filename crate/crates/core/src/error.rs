use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("frame {frame}: {message}")]
    Frame { frame: usize, message: String },

    #[error("invalid mesh: {0}")]
    Mesh(String),

    #[error("vertex {0} has no incident face")]
    IsolatedVertex(usize),

    #[error("invalid camera: {0}")]
    Camera(String),

    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    PixelOutOfBounds { u: f64, v: f64, width: usize, height: usize },

    #[error("requested {requested} points but only {available} are available")]
    NotEnoughPoints { requested: usize, available: usize },

    #[error("pose has {pose} bones but template has {template}")]
    BoneCount { pose: usize, template: usize },

    #[error("bone {bone}: quaternion norm {norm} is not unit")]
    NonUnitQuaternion { bone: usize, norm: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite value produced by node {node} ({op})")]
    NonFiniteNode { node: usize, op: &'static str },

    #[error("backward called before forward: {0}")]
    BackwardBeforeForward(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite gradient in parameter group {0}")]
    NonFiniteGradient(&'static str),

    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn frame(frame: usize, message: impl Into<String>) -> Self {
        Error::Frame {
            frame,
            message: message.into(),
        }
    }
}
