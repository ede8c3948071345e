use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every extent must be at least 1")]
    InvalidShape(Vec<usize>),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("layer {0} needs a forward cache for this operation")]
    CacheRequired(usize),

    #[error("dummy ReLU mode `second` requires an x_rand map")]
    MissingXRand,

    #[error("layer kind `{0}` has no pseudo-gradient rule")]
    UnsupportedLayer(&'static str),

    #[error("scale must be positive, got {0}")]
    InvalidScale(f64),

    #[error("no adapter connects category `{category}` to task `{task}`")]
    NotConnected { category: String, task: String },

    #[error("adapter for (`{category}`, `{task}`) already exists")]
    AlreadyConnected { category: String, task: String },

    #[error("module `{0}` already exists")]
    AlreadyExists(String),

    #[error("unknown module `{0}`")]
    UnknownModule(String),

    #[error("module `{0}` is frozen")]
    Frozen(String),

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error("degenerate statistics: {0}")]
    DegenerateStats(&'static str),

    #[error("sample budget {requested} exceeds available data ({available})")]
    InsufficientData { requested: usize, available: usize },

    #[error("teacher reached {accuracy:.4} train accuracy, below the {gate:.2} gate")]
    WeakTeacher { accuracy: f64, gate: f64 },

    #[error("invalid render parameters: {0}")]
    InvalidParams(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("evaluation over an empty set")]
    EmptyEval,

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("invalid training setup: {0}")]
    InvalidSetup(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
