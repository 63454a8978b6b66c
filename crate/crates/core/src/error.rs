use thiserror::Error;

/// Errors produced by the toolkit.
///
/// The variants are grouped so the CLI can map them onto exit codes:
/// configuration-like errors (argument, config) exit 1, data-like errors
/// (format, compatibility, data, state, I/O) exit 2, and numeric errors exit 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("compatibility error: {0}")]
    Compat(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("state error: {0}")]
    State(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Config(_) => 1,
            Error::Numeric(_) | Error::Training(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
