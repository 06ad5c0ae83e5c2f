//! Error taxonomy shared by every module.
//!
//! Numerical routines here fail loudly instead of propagating NaNs: a singular
//! covariance names its smallest eigenvalue, a diverging fixed-point iteration
//! carries its error history, an exploding trajectory reports the path index
//! and time at which it left the sane region.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A model or measure was constructed with inconsistent data
    /// (dimension mismatches, negative weights, non-SPD noise, ...).
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    /// A linear-algebra step lost positivity or conditioning.
    #[error("numerical failure in {what}: {detail} (value {value:e})")]
    Numerical {
        what: &'static str,
        detail: String,
        value: f64,
    },

    /// A user-supplied evaluator returned a non-finite value.
    #[error("evaluator returned non-finite output at t={t}, |x|={x_norm:.3e}: {what}")]
    EvaluatorFailure { what: &'static str, t: f64, x_norm: f64 },

    /// Two grid-indexed objects refer to different lattices.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// The target puts mass where the reference law has none.
    #[error(
        "absolute-continuity violation: target node {node} carries mass {mass:e} \
         but the reference density there is below {floor:e}"
    )]
    AbsoluteContinuity { node: usize, mass: f64, floor: f64 },

    /// A fixed-point iteration ran out of its iteration budget.
    #[error(
        "iteration diverged: {iterations} iterations, last marginal error {last_error:e} \
         (tolerance {tolerance:e})"
    )]
    SolverDiverged {
        iterations: usize,
        last_error: f64,
        tolerance: f64,
        /// Marginal-error history, one entry per iteration.
        log: Vec<f64>,
        /// Last iterate, log-domain: the initial factor (per active source)
        /// and the terminal density ratio (per grid node).
        last_nu0_log: Vec<f64>,
        last_rho_log: Vec<f64>,
    },

    /// A Monte Carlo ratio had too few events to be meaningful.
    #[error("insufficient statistics: {hits} tube hits, at least {required} required")]
    InsufficientStatistics { hits: u64, required: u64 },

    /// No path satisfying the chain velocity constraints connects the
    /// requested boundary states.
    #[error("infeasible boundary-value problem: {0}")]
    Infeasible(String),

    /// A routine refused to run because its hypotheses failed a probe check.
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),

    /// A simulated path left the admissible region.
    #[error("trajectory blow-up on path {path} at t={t}: |x| = {x_norm:e}")]
    TrajectoryBlowUp { path: usize, t: f64, x_norm: f64 },

    /// An output would exceed an explicit size guard.
    #[error("size guard: {what} would need {requested} entries (limit {limit})")]
    SizeGuard {
        what: &'static str,
        requested: usize,
        limit: usize,
    },
}
