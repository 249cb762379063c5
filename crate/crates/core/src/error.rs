use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("layer {index} ({name}): expected input {expected}, got {actual:?}")]
    LayerShape {
        index: usize,
        name: String,
        expected: String,
        actual: Vec<usize>,
    },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("trainable parameter {0} has no gradient")]
    MissingGradient(String),

    #[error("early stopper already stopped; no further updates accepted")]
    AlreadyStopped,

    #[error("no best-weights snapshot recorded")]
    NoSnapshot,

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("feature extraction requires a frozen backbone")]
    BackboneNotFrozen,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Dataset { path: PathBuf, msg: String },

    #[error("ppm decode: {0}")]
    Ppm(String),

    #[error("bad checkpoint magic: expected \"FTK1\", found {:?} (bytes {found:?})", String::from_utf8_lossy(found))]
    BadMagic { found: Vec<u8> },

    #[error("checkpoint header is not valid JSON: {0}")]
    HeaderJson(String),

    #[error("checkpoint header invalid: {0}")]
    HeaderInvalid(String),

    #[error("checkpoint truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("shape mismatch for {name}: expected {expected:?}, checkpoint has {found:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),

    #[error("checkpoints store f32 only; refusing to write a {0} tree")]
    UnsupportedDtype(&'static str),

    #[error("refusing to save an empty parameter tree")]
    EmptyTree,

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
