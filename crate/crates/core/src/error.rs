use thiserror::Error;

/// Errors raised anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("rank error in {op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("optimizer state error: {0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("batch error: {0}")]
    Batch(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("completeness error: missing branch {0}")]
    Completeness(String),

    #[error("leakage error: {0}")]
    Leakage(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn rank(op: &'static str, expected: usize, shape: &[usize]) -> Self {
        Error::Rank {
            op,
            expected,
            shape: shape.to_vec(),
        }
    }
}
