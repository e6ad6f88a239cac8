use thiserror::Error;

/// Library-wide error type. The three categories map onto the CLI exit
/// codes: usage (1), data (2), numerical (3).
#[derive(Debug, Error)]
pub enum Error {
    /// Caller misuse: invalid parameters, guard violations, mismatched handles.
    #[error("usage error: {0}")]
    Usage(String),
    /// Inconsistent dimensions or infeasible configuration in supplied data.
    #[error("data error: {0}")]
    Data(String),
    /// Factorization failures, singular systems, degenerate parameterizations.
    #[error("numerical error: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
