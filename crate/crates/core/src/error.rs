use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("rate singularity at t = {t}: alpha_t = {alpha}")]
    Singular { t: f64, alpha: f64 },

    #[error("state {state} is unreachable at t = {t} (probability {prob})")]
    Unreachable { state: usize, t: f64, prob: f64 },

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("unsupported schedule: {0}")]
    UnsupportedSchedule(String),

    #[error("degenerate clean-token recovery: {0}")]
    DegenerateRecovery(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
