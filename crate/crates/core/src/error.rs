//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty logits")]
    EmptyLogits,

    #[error("shape mismatch in {op}: {lhs_rows}x{lhs_cols} vs {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    #[error("{what} must have {expected} entries, got {actual}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("row covers {row} tokens but {state} are already tracked")]
    RowLengthMismatch { row: usize, state: usize },

    #[error("policy kind mismatch: expected {expected}, got {actual}")]
    PolicyKindMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("no attention rows observed yet")]
    NoRowsObserved,

    #[error("scores must be non-negative (found {value} at index {index})")]
    NegativeScore { index: usize, value: f64 },

    #[error("scores sum to zero, nothing to normalize")]
    ZeroScoreSum,

    #[error("weights must be normalized: sum is {sum}")]
    NotNormalized { sum: f64 },

    #[error("budget must be at least 1")]
    ZeroBudget,

    #[error("need at least 2 cached tokens, got {0}")]
    TooFewTokens(usize),

    #[error("cannot evict sole mass holder (weight {weight} at index {index})")]
    SoleMassHolder { index: usize, weight: f64 },

    #[error("multi-layer compounding not modeled: model has {0} layers, need exactly 1")]
    MultiLayerNotModeled(usize),

    #[error("index {index} out of range for {len} entries")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("weight file: {0}")]
    WeightFile(String),
}
