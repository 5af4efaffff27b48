use thiserror::Error;

/// Crate-wide error type. Variants that can only arise from bad user input
/// (configuration, expressions, declared constants) are distinguished from
/// failures during a run so the CLI can map them to different exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("base measure: {0}")]
    Measure(String),
    #[error("connectivity: {0}")]
    Connectivity(String),
    #[error("graph construction: {0}")]
    GraphBuild(String),
    #[error("species setup: {0}")]
    Energy(String),
    #[error("time stepping: {0}")]
    Dynamics(String),
    #[error("local solver: {0}")]
    Local(String),
    #[error("tensor field: {0}")]
    Tensor(String),
    #[error("sweep: {0}")]
    Sweep(String),
    #[error("state comparison: {0}")]
    Compare(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("config {origin}: {message}")]
    Config { origin: String, message: String },
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True when the error stems from user-supplied input rather than a
    /// failure while running. The CLI exits 1 for these and 2 otherwise.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Grid(_)
                | Error::Measure(_)
                | Error::Connectivity(_)
                | Error::GraphBuild(_)
                | Error::Energy(_)
                | Error::Parse(_)
                | Error::Config { .. }
        )
    }

    pub(crate) fn config(origin: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            origin: origin.into(),
            message: message.into(),
        }
    }
}

/// Expression parse failure with the byte offset of the offending token.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at byte {position}: {message}")]
pub struct ParseError {
    pub position: usize,
    pub message: String,
}

impl ParseError {
    pub fn new(position: usize, message: impl Into<String>) -> Self {
        ParseError {
            position,
            message: message.into(),
        }
    }
}
