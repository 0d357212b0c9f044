use alloc::string::String;

/// Errors produced anywhere in the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("expected a {expected}-dimensional tensor, got shape {got:?}")]
    Dimensionality {
        expected: usize,
        got: alloc::vec::Vec<usize>,
    },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("budget {requested} exceeds the {available} available entries")]
    Budget { requested: usize, available: usize },
    #[error("incompatible operands: {0}")]
    Incompatible(String),
    #[error("objective has no non-ignored labels")]
    EmptyObjective,
    #[error("training diverged at step {step}: {reason}")]
    TrainingFailure { step: usize, reason: String },
    #[error("overlap undefined: first operand has empty support")]
    UndefinedOverlap,
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = core::result::Result<T, Error>;
