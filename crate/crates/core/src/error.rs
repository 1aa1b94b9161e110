use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("unsupported number of cores {0} (expected 2 or 3)")]
    UnsupportedCores(usize),
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("dense materialization of {rows}x{cols} exceeds the 2^24 element guard")]
    TooLarge { rows: usize, cols: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("reuse buffer does not match the lookup: {0}")]
    PlanMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("internal consistency failure: {0}")]
    Internal(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
