use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("column {column} of the local dictionary has zero norm")]
    ZeroColumn { column: usize },

    #[error("non-finite entry at row {row}, column {column}")]
    NonFinite { row: usize, column: usize },

    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("index {index} out of range 0..{bound}")]
    IndexOutOfRange { index: usize, bound: usize },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error(
        "dense matrix needs {required} entries but the limit is {limit}; \
         set CONVSPARSE_DENSE_LIMIT to at least {required}"
    )]
    DenseLimit { required: usize, limit: usize },

    #[error("support system is rank deficient (support size {support_len})")]
    RankDeficient { support_len: usize },

    #[error("power iteration did not converge after {iterations} iterations (last estimate {last})")]
    NotConverged { iterations: usize, last: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: u64, column: usize, message: String },

    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(line: u64, column: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            column,
            message: message.into(),
        }
    }
}
