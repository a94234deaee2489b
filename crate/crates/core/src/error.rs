use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("schedule queried at n = {n} but its table only covers 1..={len}")]
    OutOfRange { n: u64, len: usize },

    #[error("value +inf or NaN at {context}; only [-inf, inf) is allowed")]
    NotExtendedReal { context: String },

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("stationary distribution: {0}")]
    Stationary(String),

    #[error("enumeration of {required} words exceeds the cap of {cap}")]
    EnumerationCap { required: u128, cap: u64 },

    #[error("not upper-decoupled at n = {n}, m = {m}, a = {a:?}, b = {b:?}: joint mass is positive while Q(a)Q(b) = 0")]
    NotDecoupled {
        n: usize,
        m: usize,
        a: Vec<u8>,
        b: Vec<u8>,
    },

    #[error("decomposition: {0}")]
    Decomposition(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("schema: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
