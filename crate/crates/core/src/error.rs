use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-supplied settings (kernel parameters, levels, flags).
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data violates the dataset contract.
    #[error("schema error{}: {message}", row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    Schema { row: Option<usize>, message: String },

    /// Inputs are well formed but the requested quantity is undefined for them.
    #[error("domain error: {0}")]
    Domain(String),

    /// A linear solve failed even after the maximal diagonal jitter.
    #[error("numerical error: {message} (condition estimate {condition:.3e})")]
    Numerical { message: String, condition: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn schema(row: Option<usize>, message: impl Into<String>) -> Self {
        Error::Schema { row, message: message.into() }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema { .. } | Error::Parse(_) | Error::Csv(_) | Error::Domain(_) => 2,
            Error::Numerical { .. } => 3,
            Error::Config(_) => 4,
            Error::Io(_) => 1,
        }
    }
}
