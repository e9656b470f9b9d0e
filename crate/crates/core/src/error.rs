use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid time series: {0}")]
    InvalidSeries(String),

    #[error("invalid embeddings: {0}")]
    InvalidEmbeddings(String),

    #[error("segment of length {segment} cannot hold a window of {seq_len} + {pred_len}")]
    SegmentTooShort {
        segment: usize,
        seq_len: usize,
        pred_len: usize,
    },

    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    BadRatios((f64, f64, f64)),

    #[error("sequence too short: need at least {needed}, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("all mean-centered embedding rows are zero")]
    DegenerateEmbeddings,

    #[error("{0} spectrum has zero total amplitude")]
    ZeroSpectrum(&'static str),

    #[error("transport problem {rows}x{cols} exceeds the oracle limit of {limit} cells")]
    TooLarge { rows: usize, cols: usize, limit: usize },

    #[error("bad magic in embedding file")]
    BadMagic,

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("cannot pool an empty token sequence")]
    EmptyText,

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("moving-average kernel {kernel} must be odd and at most {seq_len}")]
    BadKernel { kernel: usize, seq_len: usize },

    #[error("training set is empty")]
    EmptyTrainSet,

    #[error("variable {variable} has no observed entries in the window")]
    AllMasked { variable: usize },

    #[error("mask selects no cells")]
    EmptySelection,

    #[error("parse error at row {row}, column {col}: {message}")]
    Parse { row: usize, col: usize, message: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("in cell {context}")]
    Cell {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    /// True for errors caused by bad user input rather than internal failures.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::Json(_) | Error::Checkpoint(_) => false,
            Error::Cell { source, .. } => source.is_validation(),
            _ => true,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
