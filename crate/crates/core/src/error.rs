use thiserror::Error;

/// Errors raised by validation and by the attention operators.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum NaError {
    #[error("token space rank must be 1, 2 or 3, got {0}")]
    BadRank(usize),
    #[error("dimension `{name}` must be at least 1")]
    EmptyDimension { name: &'static str },
    #[error("parameters describe {got} axes but the problem has rank {expected}")]
    RankMismatch { expected: usize, got: usize },
    #[error("axis {axis}: window size must be at least 1")]
    ZeroWindow { axis: usize },
    #[error("axis {axis}: non-causal window size {window} must be odd")]
    EvenWindowNonCausal { axis: usize, window: usize },
    #[error(
        "axis {axis}: window {window} exceeds the smallest residue-class extent {class_extent}"
    )]
    WindowExceedsExtent {
        axis: usize,
        window: usize,
        class_extent: usize,
    },
    #[error("axis {axis}: dilation {dilation} must be in 1..={extent}")]
    BadDilation {
        axis: usize,
        dilation: usize,
        extent: usize,
    },
    #[error("softmax scale must be finite, got {0}")]
    BadScale(f64),
    #[error("shape mismatch for `{what}`: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("strides {strides:?} do not fit a buffer of {len} elements for shape {shape:?}")]
    BadStrides {
        shape: Vec<usize>,
        strides: Vec<usize>,
        len: usize,
    },
    #[error("non-finite value in input `{0}`")]
    NonFiniteInput(&'static str),
    #[error("dense oracle limited to {limit} tokens, problem has {tokens}")]
    ProblemTooLargeForOracle { tokens: usize, limit: usize },
    #[error("invalid tile configuration: {0}")]
    TileConfigInvalid(String),
}

pub type Result<T, E = NaError> = std::result::Result<T, E>;
