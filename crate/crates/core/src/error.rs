//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input violates a structural requirement of the trial design
    /// (mismatched lengths, empty clusters, unknown arm labels, ...).
    #[error("design violation: {0}")]
    DesignViolation(String),

    /// An argument is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A covariate column cannot support the requested computation
    /// (e.g. zero sample variance when inverse-variance weights are requested).
    #[error("degenerate covariate `{name}`: {reason}")]
    DegenerateCovariate { name: String, reason: String },

    /// Full enumeration of the randomization space was requested but the
    /// space is larger than the enumeration limit; sampling must be used.
    #[error("randomization space holds {count} schemes, above the enumeration limit {limit}; use sampling")]
    MustSample { count: u128, limit: u128 },

    /// The fixed-effect design matrix is rank deficient.
    #[error("collinear design matrix; offending columns: {}", columns.join(", "))]
    CollinearDesign { columns: Vec<String> },

    /// An iterative procedure exhausted its budget.
    #[error("no convergence: {0}")]
    NoConvergence(String),

    /// A matrix inversion or similar numerical step failed.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The observed allocation is not a member of the supplied randomization
    /// space, so a randomization test cannot be referenced against it.
    #[error("protocol violation: {0}")]
    Protocol(String),

    /// Malformed input file.
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
