//! Crate-wide error type.

/// Errors produced by dataset handling, kernel evaluation, regression and
/// estimation routines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty data: {0}")]
    EmptyData(&'static str),

    #[error("sample too small: need at least {need} rows, got {got}")]
    SampleTooSmall { need: usize, got: usize },

    #[error("kernel `{kernel}` takes {expected} response rows, got {got}")]
    ArityMismatch {
        kernel: String,
        expected: usize,
        got: usize,
    },

    #[error("unknown kernel `{name}`; available: {available}")]
    UnknownKernel { name: String, available: String },

    #[error("kernel `{0}` has no analytic first projection")]
    NoAnalyticEll1(String),

    #[error("fold too small: {0}")]
    FoldTooSmall(String),

    #[error("k-nearest-neighbor k={k} exceeds training size {n}")]
    KnnTooLarge { k: usize, n: usize },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("non-numeric cell at data row {row}, column `{col}`: {value:?}")]
    NonNumeric {
        row: usize,
        col: String,
        value: String,
    },

    #[error("non-finite value at data row {row}, column `{col}`")]
    NonFinite { row: usize, col: String },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
