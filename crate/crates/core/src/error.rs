use thiserror::Error;

/// Errors raised by the polymer laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// The spectral gap is too small to reach the requested truncation
    /// tolerance within the depth cap.
    #[error("pinned-string truncation needs depth {required}, above the cap {cap}")]
    TruncationDepth { required: u64, cap: u64 },

    #[error(
        "importance weights degenerate at beta={beta}, T={horizon}, J={chain}: \
         ESS {ess:.2} below floor {floor}"
    )]
    Degenerate {
        beta: f64,
        horizon: usize,
        chain: usize,
        ess: f64,
        floor: f64,
    },

    #[error("cumulant recursion above its explosion threshold at y={y} (last iterate {last})")]
    AboveThreshold { y: f64, last: f64 },

    #[error("degenerate process: {0}")]
    DegenerateProcess(String),

    #[error("only {usable} usable rows in the scaling study, at least 3 required")]
    InsufficientRows { usable: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
