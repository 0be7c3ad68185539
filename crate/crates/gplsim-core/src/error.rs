//! Error types shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by model construction, fitting and inference.
#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    /// A mathematical precondition on an input was violated.
    #[error("domain error: {0}")]
    Domain(String),

    /// An invalid run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A linear-algebra step failed (factorization, ill-conditioning).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// An iterative solver exhausted its iteration budget.
    #[error("did not converge: {0}")]
    NonConvergence(String),

    /// The inner spline design is rank deficient even after the ridge guard.
    #[error("singular spline design: {0}")]
    SingularDesign(String),

    /// The sandwich bread matrix is numerically singular.
    #[error("singular bread matrix: condition estimate {0:.3e}")]
    SingularBread(f64),

    /// Confidence-interval bracketing found no crossing within the search range.
    #[error("bracket failure: {0}")]
    BracketFailure(String),

    /// Too large a fraction of bootstrap replicates failed to converge.
    #[error("too many bootstrap failures: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },

    /// Malformed input data (CSV and similar).
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Input data is missing required columns.
    #[error("schema error: missing columns {0:?}")]
    Schema(Vec<String>),

    /// The same (subject, visit) pair appeared twice in the input.
    #[error("duplicate visit {visit} for subject {subject}")]
    DuplicateVisit { subject: String, visit: String },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
