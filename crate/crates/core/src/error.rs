use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("step too coarse: |H| = {freq_mhz:.3e} MHz with dt = {dt_ns:.3e} ns gives phase {phase:.3} rad per step (limit 0.1)")]
    StepSize {
        freq_mhz: f64,
        dt_ns: f64,
        phase: f64,
    },

    #[error("frame mismatch: expected {expected}, got {got}")]
    FrameMismatch { expected: String, got: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
