use std::fmt;

/// Error taxonomy mirrored by the CLI exit codes: data/config problems are
/// recoverable input errors, numeric problems are computation failures.
#[derive(Debug)]
pub enum CrowdError {
    /// Malformed or inconsistent input data (files, annotations, shapes).
    Data(String),
    /// Invalid configuration (bad parameter values, mismatched network specs).
    Config(String),
    /// Numerical failure (non-finite values, degenerate domains).
    Numeric(String),
    Io(std::io::Error),
}

impl fmt::Display for CrowdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CrowdError::Data(m) => write!(f, "data error: {m}"),
            CrowdError::Config(m) => write!(f, "config error: {m}"),
            CrowdError::Numeric(m) => write!(f, "numeric error: {m}"),
            CrowdError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for CrowdError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CrowdError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for CrowdError {
    fn from(e: std::io::Error) -> Self {
        CrowdError::Io(e)
    }
}

impl From<serde_json::Error> for CrowdError {
    fn from(e: serde_json::Error) -> Self {
        CrowdError::Data(format!("json: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, CrowdError>;

pub(crate) fn data_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CrowdError::Data(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CrowdError::Config(msg.into()))
}

pub(crate) fn numeric_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CrowdError::Numeric(msg.into()))
}
