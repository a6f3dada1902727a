use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Stage of the JEPA forward graph, used to locate non-finite values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Context,
    Target,
    Predictor,
    Loss,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Context => "context encoder",
            Stage::Target => "target encoder",
            Stage::Predictor => "predictor",
            Stage::Loss => "loss",
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("input is empty")]
    EmptyInput,
    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("{axis} dimension {dim} is not divisible by patch side {side}")]
    NotDivisible {
        axis: &'static str,
        dim: usize,
        side: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate mask: {masked} of {num_patches} patches masked")]
    DegenerateMask { num_patches: usize, masked: usize },
    #[error("non-finite loss produced in the {0}")]
    NonFiniteLoss(Stage),
    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),
    #[error("zero-norm vector cannot be compared under the cosine metric")]
    ZeroNorm,
    #[error("label mismatch: {0}")]
    LabelMismatch(String),
    #[error("at least two classes are required, found {0}")]
    TooFewClasses(usize),
}
