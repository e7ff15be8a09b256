use thiserror::Error;

/// Errors produced by the caching, prediction, selection and experiment layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("step {step} is not after newest cached step {newest}")]
    NonMonotonicStep { step: usize, newest: usize },
    #[error("insufficient snapshots: needed {needed}, have {have}")]
    InsufficientSnapshots { needed: usize, have: usize },
    #[error("step {step} out of range for {total} steps")]
    OutOfRange { step: usize, total: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("singular least-squares system: {0}")]
    SingularSystem(String),
    #[error("no active predictor")]
    NoActivePredictor,
    #[error("predictor index {index} out of range for {len} candidates")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
    #[error("unknown sweep axis `{0}`")]
    UnknownAxis(String),
    #[error("peak value must be positive")]
    ZeroPeak,
    #[error("trace was not produced by the tap strategy")]
    NotATapTrace,
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by user-supplied configuration rather than
    /// numerics or I/O.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::InvalidConfig(_)
                | Error::InvalidSchedule(_)
                | Error::UnknownStrategy(_)
                | Error::UnknownAxis(_)
                | Error::ConfigMismatch(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
