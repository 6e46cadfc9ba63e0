use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GemError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GemError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("layer `{layer}`: expected {expected} bytes for shape {shape:?}, found {found}")]
    ByteLength {
        layer: String,
        shape: Vec<usize>,
        expected: u64,
        found: u64,
    },

    #[error("layer `{layer}`: non-finite value {value} at flat index {index}")]
    NonFinite {
        layer: String,
        index: usize,
        value: f64,
    },

    #[error("duplicate layer name `{0}`")]
    DuplicateLayer(String),

    #[error("layer `{layer}`: invalid shape {shape:?}")]
    InvalidShape { layer: String, shape: Vec<usize> },

    #[error("layer `{layer}`: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        layer: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("gradients do not pair with weights: {0}")]
    Pairing(String),

    #[error("layer `{layer}`: index {index} out of range for {len} parameters")]
    IndexOutOfRange {
        layer: String,
        index: u64,
        len: usize,
    },

    #[error("layer `{layer}`: negative or non-finite score {value} at index {index}")]
    InvalidScore {
        layer: String,
        index: usize,
        value: f64,
    },

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("ratio {0} outside (0, 1]")]
    RatioOutOfRange(f64),

    #[error("budget {budget} exceeds {total} available parameters")]
    BudgetTooLarge { budget: usize, total: usize },

    #[error("no tunable layers but a nonzero budget was requested")]
    NoTunableLayers,

    #[error("k = {k} out of range for {len} scores")]
    KOutOfRange { k: usize, len: usize },

    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),

    #[error("mask file: {0}")]
    MaskFormat(String),

    #[error("unsupported mask file version {0}")]
    MaskVersion(u32),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl GemError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GemError::Io {
            path: path.into(),
            source,
        }
    }
}
