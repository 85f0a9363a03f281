use thiserror::Error;

/// Errors produced by the core pipeline.
#[derive(Debug, Error)]
pub enum SliceError {
    #[error("dimension mismatch: left operand is {left_rows}x{left_cols}, right operand is {right_rows}x{right_cols}")]
    DimensionMismatch {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("shape mismatch: expected {expected_rows}x{expected_cols}, got {got_rows}x{got_cols}")]
    ShapeMismatch {
        expected_rows: usize,
        expected_cols: usize,
        got_rows: usize,
        got_cols: usize,
    },

    #[error("non-finite entry at ({row}, {col}) in a {rows}x{cols} matrix")]
    NonFiniteEntry {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("invalid matrix construction: {rows}x{cols} requires {expected} entries, got {got}")]
    BadEntryCount {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },

    #[error("requested rank {requested} exceeds the maximum {max} for a {rows}x{cols} matrix")]
    RankTooLarge {
        requested: usize,
        max: usize,
        rows: usize,
        cols: usize,
    },

    #[error("sketch width {sketch_width} exceeds min dimension {min_dim}; shrink rank or oversampling")]
    SketchTooWide { sketch_width: usize, min_dim: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("sampler exhausted after {drawn} examples; {requested} more requested")]
    SamplerExhausted { drawn: usize, requested: usize },

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("duplicate task id: {0}")]
    DuplicateTaskId(String),

    #[error("combinatorial budget exceeded: C({pool}, {subset}) = {count} subsets > budget {budget}")]
    BudgetExceeded {
        pool: usize,
        subset: usize,
        count: u128,
        budget: u64,
    },

    #[error("results matrix entry ({row}, {col}) is unpopulated")]
    UnpopulatedEntry { row: usize, col: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, SliceError>;

impl SliceError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        SliceError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn malformed(path: impl Into<String>, reason: impl Into<String>) -> Self {
        SliceError::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
