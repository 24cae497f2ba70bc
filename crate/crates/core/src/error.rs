use thiserror::Error;

/// Errors raised by the simulation, stopping and estimation layers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabError {
    #[error("{what} = {value} is outside the admissible range")]
    OutOfRange { what: &'static str, value: f64 },

    #[error("stop index {t_idx} precedes anchor index {s_idx}")]
    InvalidStopOrder { s_idx: usize, t_idx: usize },

    #[error("non-finite value produced at grid index {index}")]
    NumericalBlowup { index: usize },

    #[error("invalid stopping rule: {0}")]
    InvalidRule(String),

    #[error("partition events are not exclusive and exhaustive: {holding} events hold")]
    PartitionViolation { holding: usize },

    #[error("rate {value} at grid index {index} is not positive")]
    NonPositiveRate { index: usize, value: f64 },

    #[error("bundle needs at least 2 continuations, got {m}")]
    InsufficientBundle { m: usize },

    #[error("stopping family collapses onto the anchor at scale {scale} ({fraction} of continuations)")]
    DegenerateStoppingFamily { scale: f64, fraction: f64 },

    #[error("need at least {needed} samples, got {n}")]
    InsufficientSamples { n: usize, needed: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid scenario: {0}")]
    ScenarioInvalid(String),

    #[error("intrinsic time {available} is shorter than the requested {requested}")]
    InsufficientIntrinsicTime { available: f64, requested: f64 },
}

pub type Result<T> = std::result::Result<T, LabError>;
