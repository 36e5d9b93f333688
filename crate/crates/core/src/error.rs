use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Top-level error for every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error(transparent)]
    Compatibility(#[from] CompatError),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the file system rather than by the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

/// Structural problems found while decoding a `.pem.bin` file.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("file is {len} bytes, too short for the 8-byte header length")]
    Truncated { len: usize },

    #[error("header length {declared} exceeds the {available} bytes that follow it")]
    HeaderTooLarge { declared: u64, available: usize },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("tensor {name:?}: unknown dtype {dtype:?}")]
    UnknownDtype { name: String, dtype: String },

    #[error("tensor {name:?}: data_offsets span {actual} bytes but shape needs {expected}")]
    SizeMismatch {
        name: String,
        expected: usize,
        actual: usize,
    },

    #[error("tensor {name:?}: data_offsets end {end} is past the {len}-byte data region")]
    OutOfBounds { name: String, end: usize, len: usize },

    #[error("tensors {first:?} and {second:?} have overlapping data_offsets")]
    OffsetOverlap { first: String, second: String },

    #[error("data region is not densely packed: {0}")]
    NotDense(String),
}

/// The first violated condition when checking that adapters can be composed.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CompatError {
    #[error("no adapters given")]
    Empty,

    #[error("kind mismatch: adapter {first} is {first_kind}, adapter {second} is {second_kind}")]
    KindMismatch {
        first: usize,
        second: usize,
        first_kind: String,
        second_kind: String,
    },

    #[error("fingerprint mismatch: adapter {first} has base {first_fp}, adapter {second} has base {second_fp}")]
    FingerprintMismatch {
        first: usize,
        second: usize,
        first_fp: String,
        second_fp: String,
    },

    #[error("rank mismatch: adapter {first} has rank {first_rank}, adapter {second} has rank {second_rank}")]
    RankMismatch {
        first: usize,
        second: usize,
        first_rank: usize,
        second_rank: usize,
    },

    #[error("shape mismatch between adapters {first} and {second} at {tensor}")]
    ShapeMismatch {
        first: usize,
        second: usize,
        tensor: String,
    },

    #[error("{mode} mode does not support {kind} adapters")]
    ModeUnsupported { mode: String, kind: String },

    #[error("{adapters} adapters but {weights} weights")]
    WeightCount { adapters: usize, weights: usize },

    #[error("weight {index} is {value}, delta mode needs nonnegative weights")]
    NegativeWeight { index: usize, value: f64 },

    #[error("adapter {index}: {tensor} has a non-positive entry, geometric mode needs l > 0")]
    NonPositiveScale { index: usize, tensor: String },

    #[error("adapter base {adapter} does not match model base {model}")]
    BaseMismatch { adapter: String, model: String },
}
