//! Crate-wide error type.
//!
//! Every fallible boundary in the crate reports through [`Error`] so that the
//! CLI can map failures onto its documented exit codes without string
//! matching. Variants carry enough structure (element ids, residuals,
//! certificates) for a caller to print an actionable message.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file (syntax or schema).
    #[error("parse error: {0}")]
    Parse(String),

    /// Input violated a structural rule; `element` names the offending
    /// node/edge where applicable.
    #[error("invalid network: {message}")]
    Validation { message: String },

    /// Newton iteration on the steady-state equations failed to converge.
    #[error("steady-state solve did not converge: residual {residual:.3e} after {iterations} iterations")]
    SimulationDiverged { residual: f64, iterations: usize },

    /// The steady-state Jacobian is singular even after zero-flow
    /// regularization; lists the edges whose flows vanish.
    #[error("singular steady-state Jacobian; degenerate (zero-flow) edges: {edges:?}")]
    SingularJacobian { edges: Vec<usize> },

    /// The sequential linearization loop exhausted its iteration budget.
    #[error("optimization did not converge: {0}")]
    NonConvergent(String),

    /// Linearization requested at a point with a vanishing flow that cannot
    /// be regularized (all flows zero and no scale available).
    #[error("degenerate linearization point: {0}")]
    DegenerateFlow(String),

    /// Conic program reported primal infeasibility; carries the dual
    /// certificate (Farkas ray) for diagnostics.
    #[error("problem is infeasible (certificate norm {certificate_norm:.3e})")]
    Infeasible { certificate_norm: f64 },

    /// Conic program reported dual infeasibility (unbounded primal); carries
    /// the primal certificate ray norm.
    #[error("problem is unbounded (certificate norm {certificate_norm:.3e})")]
    Unbounded { certificate_norm: f64 },

    /// Conic solver stopped without a definitive status.
    #[error("conic solver stalled: {status} (primal res {r_prim:.3e}, dual res {r_dual:.3e})")]
    SolverStalled {
        status: String,
        r_prim: f64,
        r_dual: f64,
    },

    /// A covariance matrix failed its positive-semidefiniteness check.
    #[error("covariance is not positive semidefinite: eigenvalue {eigenvalue:.3e}")]
    NotPsd { eigenvalue: f64 },

    /// Mismatched dimensions between two artifacts that must agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An out-of-sample projection failed for one or more realizations.
    #[error("projection failed for sample {sample}: {reason}")]
    Projection { sample: usize, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
