//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by quadrature construction, posterior solves, likelihood
/// evaluation, fitting, and study configuration.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A curvature matrix was not symmetric positive definite, so its
    /// Cholesky factorization failed. Carries the subject index when the
    /// failure occurred inside a per-subject solve.
    #[error("curvature matrix is not positive definite{}", match .subject {
        Some(l) => format!(" (subject {l})"),
        None => String::new(),
    })]
    CurvatureNotPositiveDefinite { subject: Option<usize> },

    /// The integrand evaluated to NaN or +inf at a quadrature node.
    #[error("integrand is not finite at tensor node {node:?}")]
    NonFiniteIntegrand { node: Vec<usize> },

    /// The posterior mode search hit its iteration cap before reaching the
    /// gradient tolerance. Carries the last iterate for diagnostics.
    #[error("posterior mode search did not converge after {iterations} iterations (gradient max-norm {grad_norm:.3e})")]
    ModeNotConverged {
        iterations: usize,
        grad_norm: f64,
        last_iterate: Vec<f64>,
    },

    /// A Newton iterate became non-finite. The objective is strongly convex,
    /// so this signals a bug or pathological inputs rather than an expected
    /// failure mode.
    #[error("posterior mode iterate became non-finite")]
    ModeDiverged,

    /// The second-order density correction produced `1 + c1 <= 0`; a density
    /// cannot be non-positive, so the corrected value is unusable.
    #[error("second-order correction gives a non-positive density (1 + c1 = {value:.6e})")]
    NonPositiveCorrectedDensity { value: f64 },

    /// A per-subject evaluation failed inside a batched operation.
    #[error("evaluation failed for subject {subject}: {source}")]
    Subject {
        subject: usize,
        #[source]
        source: Box<Error>,
    },

    /// The outer-derivative matrix of the sandwich estimator is singular.
    #[error("sandwich estimator: the score-derivative matrix B is singular")]
    SingularInformation,

    /// Every replicate of a study failed to converge, so no statistics can
    /// be formed.
    #[error("study failed: all {replicates} replicates were non-convergent for method {method}")]
    AllReplicatesFailed { method: String, replicates: usize },

    /// A configuration file failed validation. `path` is the offending field.
    #[error("invalid configuration at `{path}`: {message}")]
    Config { path: String, message: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: msg.into(),
        }
    }

    pub(crate) fn for_subject(self, subject: usize) -> Self {
        Error::Subject {
            subject,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
