//! Synthesis and simulation toolkit for stochastic model predictive control of
//! linear systems with additive bounded disturbances.
//!
//! The controller keeps a nominal trajectory and an error channel: the input is
//! `u = v + K e`, where `K` prestabilizes the error dynamics and the free part
//! `v` is optimized online. Chance constraints on the state are converted
//! offline into deterministic constraints on the nominal trajectory by
//! *tightening*: for each constraint row and each prediction step, a quantile
//! of the sampled error distribution is subtracted from the constraint offset.
//! Sample counts are chosen so that the empirical quantile certifies the
//! requested violation level with high confidence.
//!
//! The offline pipeline ([`mpc::synthesize`]) produces:
//!
//! * the LQR gain `K` and error cost matrix `P` ([`mpc`]),
//! * per-step tightened offsets for state, input and terminal constraints
//!   ([`scenario`]),
//! * a terminal invariant set, the set of feasible nominal initial conditions,
//!   and a robustly invariant first-step set that makes the online program
//!   recursively feasible with prescribed probability ([`sets`]).
//!
//! The online half ([`mpc::control_step`], [`sim`]) solves a small dense QP at
//! every step and falls back to the prestabilizing gain if the program is ever
//! infeasible. [`sim`] runs seeded closed-loop Monte Carlo batches and region
//! comparisons against two baseline tightening schemes (pure worst-case, and
//! one-step-quantile with worst-case tail).
//!
//! Everything downstream of a seed is deterministic: the solvers are
//! pivoting-rule-deterministic, sampling uses counter-based ChaCha streams,
//! and parallel batches collect results by run index.

pub mod cli;
pub mod model;
pub mod mpc;
pub mod poly;
pub mod scenario;
pub mod sets;
pub mod sim;
pub mod solver;

pub use model::{ConstraintSpec, DisturbanceModel, LinearSystem};
pub use mpc::{SynthesisBundle, TighteningMode};
pub use poly::Polytope;
