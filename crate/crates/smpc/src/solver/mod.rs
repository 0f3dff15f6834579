//! Dense LP and QP solvers for polytope calculus and the online controller.
//!
//! Both solvers are written for the small, dense, numerically tame problems
//! this crate produces (tens of variables, at most a few hundred rows): a
//! two-phase revised simplex method for LPs and a primal active-set method
//! for strictly convex QPs. Both are deterministic — identical inputs take
//! identical pivot sequences and yield bitwise-identical outputs.

mod lp;
mod qp;

pub use lp::{solve_lp, LpOutcome, LpSolution};
pub use qp::{solve_qp, QpOutcome, QpProblem, QpSolution, QpWarmStart};

use thiserror::Error;

/// Numeric settings shared by both solvers. All hard-coded thresholds live
/// here so the two solvers and their callers agree on what "zero" means.
#[derive(Clone, Copy, Debug)]
pub struct Tolerances {
    /// Constraint satisfaction slack: `a·x <= b + feas` counts as feasible.
    pub feas: f64,
    /// Optimality slack on reduced costs / multiplier signs.
    pub opt: f64,
    /// Magnitude below which a pivot or direction entry is treated as zero.
    pub pivot: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { feas: 1e-8, opt: 1e-7, pivot: 1e-10 }
    }
}

impl Tolerances {
    pub const fn standard() -> Self {
        Tolerances { feas: 1e-8, opt: 1e-7, pivot: 1e-10 }
    }
}

/// Hard failures. Infeasibility and unboundedness are *outcomes*, not errors;
/// these are reserved for numerical breakdown or resource exhaustion.
#[derive(Debug, Error)]
pub enum SolverError {
    #[error("iteration limit {limit} exceeded in {phase}")]
    IterationLimit { phase: &'static str, limit: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("objective Hessian is not positive definite")]
    NotPositiveDefinite,
}
