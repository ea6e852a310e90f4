use thiserror::Error;

/// Errors raised by the simulation library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("height {x} outside the boundary layer [0, {height}]")]
    Domain { x: f64, height: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unstable step: {0}")]
    Unstable(String),

    #[error("smoothing polynomial system for r = {r} is numerically singular")]
    SingularSystem { r: usize },

    #[error("mean of Y on level {level} is indistinguishable from zero ({mean:.3e} +/- {std_error:.3e})")]
    InsignificantBias {
        level: usize,
        mean: f64,
        std_error: f64,
    },

    #[error("required number of levels {required} exceeds the maximum {max}")]
    LevelCap { required: usize, max: usize },

    #[error("{failed} of {total} samples failed, above the abort threshold")]
    SampleFailures { failed: u64, total: u64 },

    #[error("invalid timeline: {0}")]
    Timeline(String),
}

pub type Result<T> = std::result::Result<T, Error>;
