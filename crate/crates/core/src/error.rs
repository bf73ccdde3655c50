use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("viewpoint distribution is not normalized (sum = {sum})")]
    NonNormalizedInput { sum: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding has zero norm")]
    ZeroNormEmbedding,
    #[error("cannot fuse an empty group")]
    EmptyGroup,
    #[error("score vector has no positive entry")]
    AllZeroScore,
    #[error("insufficient pool: {0}")]
    InsufficientPool(String),
    #[error("empty pool")]
    EmptyPool,
    #[error("index {index} out of range (valid: 0..={max})")]
    IndexOutOfRange { index: usize, max: usize },
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid record: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
