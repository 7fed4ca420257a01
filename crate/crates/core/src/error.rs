use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: non-finite value in result")]
    NonFinite { op: &'static str },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("unknown concept id {id} (concept count {count})")]
    UnknownConcept { id: usize, count: usize },

    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("sampler produced a non-finite state at timestep {timestep}")]
    SamplerDiverged { timestep: usize },

    #[error("non-finite gradient at {stage} step {step}")]
    NonFiniteGradient { stage: &'static str, step: usize },

    #[error("feature tap {index}: {reason}")]
    TapMismatch { index: usize, reason: String },

    #[error("mask layout does not match parameter store: {0}")]
    MaskLayout(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
