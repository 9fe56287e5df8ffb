use std::fmt;

/// Errors surfaced by fallible operations (configuration loading, iterative
/// solvers that fail to converge, file I/O). Contract violations such as an
/// infeasible bid panic instead; they indicate caller bugs, not recoverable
/// conditions.
#[derive(Debug)]
pub enum Error {
    /// A configuration value violates its invariants.
    InvalidConfig(String),
    /// An iterative solver hit its iteration cap. Carries the last residual
    /// so callers can report how far from the fixed point it stopped.
    NoConvergence {
        what: &'static str,
        residual: f64,
        iterations: usize,
    },
    /// Array shapes passed to an operation do not agree.
    ShapeMismatch(String),
    Io(std::io::Error),
    Json(serde_json::Error),
    Csv(csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::NoConvergence {
                what,
                residual,
                iterations,
            } => write!(
                f,
                "{what} did not converge after {iterations} iterations (last residual {residual:.3e})"
            ),
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
            Error::Csv(e) => write!(f, "csv error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            Error::Csv(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e)
    }
}
