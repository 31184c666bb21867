//! Error type shared across the library.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A frame matrix (or one of its blocks) is numerically singular.
    #[error("singular frame: {detail}")]
    SingularFrame { detail: String },

    /// The two anholonomity formulas disagree beyond tolerance.
    #[error(
        "anholonomity formulas disagree: |dev| = {max_dev:.3e} > {tol:.1e} at R^{alpha}_{{{beta}{gamma}}}"
    )]
    DerivativeMismatch {
        max_dev: f64,
        tol: f64,
        alpha: usize,
        beta: usize,
        gamma: usize,
    },

    /// A quantity that must vanish for an invariant frame does not.
    #[error("invariance violation: {what} = {value:.3e} exceeds {tol:.1e}")]
    InvarianceViolation { what: String, value: f64, tol: f64 },

    /// The declared Lie algebra splitting violates one of its defining identities.
    #[error("invalid splitting: {identity} violated at {indices:?}, |value| = {value:.3e}")]
    InvalidSplit {
        identity: String,
        indices: Vec<usize>,
        value: f64,
    },

    /// The group-velocity Hessian is rank deficient.
    #[error("not group-regular: group-velocity Hessian has rank {rank} < {dim}")]
    NotGRegular { rank: usize, dim: usize },

    /// Newton iteration failed to reach the residual tolerance.
    #[error("Newton did not converge after {iters} iterations (residual {residual:.3e})")]
    NewtonDiverged { iters: usize, residual: f64 },

    /// The Newton Jacobian is rank deficient and no damped step makes progress.
    #[error("singular Jacobian: rank defect {defect}, no damped step reduces residual {residual:.3e}")]
    SingularJacobian { defect: usize, residual: f64 },

    /// Constraint rows that no choice of state or rate can satisfy.
    #[error("inconsistent constraints (residual {residual:.3e}) in rows: {}", rows.join("; "))]
    Inconsistent { rows: Vec<String>, residual: f64 },

    /// Two vortices closer than the logarithmic-singularity threshold.
    #[error("vortex collision: |z_{i} - z_{j}| = {dist:.3e} < 1e-8{}", time.map(|t| format!(" at t = {t}")).unwrap_or_default())]
    CollisionSingularity {
        i: usize,
        j: usize,
        dist: f64,
        time: Option<f64>,
    },

    /// An integration step failed; carries the time of failure.
    #[error("step failed at t = {time}: {source}")]
    StepFailed {
        time: f64,
        #[source]
        source: Box<Error>,
    },

    /// Expression syntax error.
    #[error("parse error at byte {offset}: expected {expected}")]
    Parse { offset: usize, expected: String },

    /// Evaluation outside a function's domain (ln of a non-positive value, ...).
    #[error("domain error: {what}")]
    Domain { what: String },

    /// A pivot below the singularity threshold in an LU factorization.
    #[error("singular matrix: pivot {pivot:.3e} at column {col} below 1e-12")]
    SingularMatrix { pivot: f64, col: usize },

    /// Invalid configuration or arguments.
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
