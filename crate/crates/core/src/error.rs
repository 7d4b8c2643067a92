use alloc::string::String;

/// Failure modes shared by every module of the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("downsampling unsupported: source {src:?} larger than target {target:?}")]
    DownsamplingUnsupported {
        src: (usize, usize),
        target: (usize, usize),
    },
    #[error("layer selection matches no channel maps")]
    EmptySelection,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("duplicate entry: {0}")]
    Duplicate(String),
    #[error("perturbed record in train split: {0}")]
    PerturbedTrainRecord(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("actnorm already initialized")]
    AlreadyInitialized,
    #[error("actnorm not initialized")]
    NotInitialized,
    #[error("numerical overflow in block {block}")]
    NumericalOverflow { block: usize },
    #[error("non-finite gradient in block {block}")]
    NonFiniteGradient { block: usize },
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("covariance not positive definite after ridge")]
    NotPositiveDefinite,
    #[error("scored set must contain both classes")]
    SingleClass,
    #[error("scored set has no positives")]
    NoPositives,
    #[error("empty score list")]
    EmptyScores,
    #[error("softmax maps are not normalized: {0}")]
    NotNormalized(String),
}

pub type Result<T> = core::result::Result<T, Error>;
