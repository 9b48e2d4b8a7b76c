use std::path::PathBuf;

use crate::tensor::DType;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header length: {0}")]
    HeaderLength(String),

    #[error("header is not valid JSON: {0}")]
    HeaderSyntax(String),

    #[error("invalid header entry {name:?}: {reason}")]
    HeaderEntry { name: String, reason: String },

    #[error("unsupported dtype {0:?}")]
    UnsupportedDType(String),

    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error("out-of-bounds offsets for {name:?}: [{begin}, {end}) exceeds data region of {len} bytes")]
    OutOfBounds {
        name: String,
        begin: usize,
        end: usize,
        len: usize,
    },

    #[error("overlapping offsets: {first:?} and {second:?}")]
    Overlap { first: String, second: String },

    #[error("data region is {actual} bytes but entries cover {expected}")]
    DataLength { expected: usize, actual: usize },

    #[error("no tensor named {0:?}")]
    MissingTensor(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("expected dtype {expected}, found {found}")]
    DType { expected: DType, found: DType },

    #[error("axis {axis} index {index} out of range for shape {shape:?}")]
    AxisRange {
        axis: usize,
        index: usize,
        shape: Vec<usize>,
    },

    #[error("unrecognized module name {0:?}")]
    UnknownModule(String),

    #[error("orphan factor {0:?}: no matching lora_a/lora_b partner")]
    OrphanFactor(String),

    #[error("rank mismatch for {module:?}: {detail}")]
    RankMismatch { module: String, detail: String },

    #[error("duplicate LoRA pair for module {0:?}")]
    DuplicatePair(String),

    #[error("merge target {0:?} is not present in the base checkpoint")]
    MissingTarget(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown mesh axis {0:?}")]
    UnknownAxis(String),

    #[error("{0}")]
    Invalid(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
