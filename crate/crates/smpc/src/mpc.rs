//! Controller synthesis and the online receding-horizon step.
//!
//! Offline, [`synthesize`] turns system data plus a tightening mode into a
//! self-contained [`SynthesisBundle`]: the prestabilizing LQR gain, the error
//! cost matrix, certified per-step constraint tightenings, the terminal and
//! first-step sets, and a precomputed static image of the online QP in which
//! only the right-hand side depends on the measured state.
//!
//! Online, [`control_step`] assembles that QP at the current state and solves
//! it (warm-startable with the shifted previous solution); the first block of
//! the optimizer is the applied input correction.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::model::{derive_rng, ConstraintSpec, DisturbanceModel, LinearSystem, ModelError};
use crate::poly::{PolyError, Polytope};
use crate::scenario::{
    sample_plan_banded, tighten_input, tighten_input_rf_tube, tighten_input_robust, tighten_state,
    tighten_state_rf_tube, tighten_state_robust, tighten_terminal, tighten_terminal_rf_tube,
    ErrorBank, SamplePlan, ScenarioError, Tightening,
};
use crate::sets::{
    first_step_region, nominal_terminal_invariant, robust_control_invariant, rpi_outer_tube,
    t_step_set, terminal_invariant, IterationLog, SetsError, TubeLog,
};
use crate::solver::{solve_qp, QpOutcome, QpProblem, QpWarmStart, SolverError, Tolerances};

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("closed loop is not stable (spectral radius {rho})")]
    NotStabilizing { rho: f64 },
    #[error("{what} did not converge within {iterations} iterations")]
    NonConvergence { what: &'static str, iterations: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sets(#[from] SetsError),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Which offline tightening fills the bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TighteningMode {
    /// Certified per-step scenario quantiles.
    Proposed,
    /// One-step quantile plus worst-case accumulation.
    RfTube,
    /// Pure worst-case accumulation.
    Robust,
}

impl fmt::Display for TighteningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TighteningMode::Proposed => "proposed",
            TighteningMode::RfTube => "rf-tube",
            TighteningMode::Robust => "robust",
        })
    }
}

impl FromStr for TighteningMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "proposed" => Ok(TighteningMode::Proposed),
            "rf-tube" => Ok(TighteningMode::RfTube),
            "robust" => Ok(TighteningMode::Robust),
            other => Err(format!("unknown mode '{other}' (proposed | rf-tube | robust)")),
        }
    }
}

/// Largest eigenvalue magnitude.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Infinite-horizon LQR: fixed-point iteration on the Riccati map until the
/// iterate moves less than `1e-12` (relative), returning the gain and the
/// Riccati solution. The gain is verified stabilizing.
pub fn lqr_gain(
    sys: &LinearSystem,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), MpcError> {
    let n = sys.n();
    let m = sys.m();
    if q.nrows() != n || q.ncols() != n {
        return Err(MpcError::InvalidParameter("state weight must be n x n".into()));
    }
    if r.nrows() != m || r.ncols() != m {
        return Err(MpcError::InvalidParameter("input weight must be m x m".into()));
    }
    if (q - q.transpose()).amax() > 1e-9 * (1.0 + q.amax()) {
        return Err(MpcError::InvalidParameter("state weight must be symmetric".into()));
    }
    if q.clone().symmetric_eigenvalues().iter().any(|&e| e < -1e-9 * (1.0 + q.amax())) {
        return Err(MpcError::InvalidParameter("state weight must be positive semidefinite".into()));
    }
    if Cholesky::new(symmetrize(r)).is_none() {
        return Err(MpcError::InvalidParameter("input weight must be positive definite".into()));
    }

    let a = sys.a();
    let b = sys.b();
    let mut p = q.clone();
    let cap = 100_000;
    let mut converged = false;
    for _ in 0..cap {
        let rbb = symmetrize(&(r + b.transpose() * &p * b));
        let chol = Cholesky::new(rbb)
            .ok_or_else(|| MpcError::InvalidParameter("input-weight update lost definiteness".into()))?;
        let bpa = b.transpose() * &p * a;
        let next = symmetrize(&(q + a.transpose() * &p * a - bpa.transpose() * chol.solve(&bpa)));
        let delta = (&next - &p).amax();
        p = next;
        if delta <= 1e-12 * (1.0 + p.amax()) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(MpcError::NonConvergence { what: "Riccati fixed point", iterations: cap });
    }
    let rbb = symmetrize(&(r + b.transpose() * &p * b));
    let chol = Cholesky::new(rbb)
        .ok_or_else(|| MpcError::InvalidParameter("input-weight update lost definiteness".into()))?;
    let k = -chol.solve(&(b.transpose() * &p * a));
    let rho = spectral_radius(&sys.closed_loop(&k));
    if rho >= 1.0 {
        return Err(MpcError::NotStabilizing { rho });
    }
    Ok((k, p))
}

/// Solve `P = A' P A + M` for stable `A` by doubling:
/// `S <- S + A_k' S A_k`, `A_k <- A_k^2`. The residual is verified to
/// `1e-9` relative before returning.
pub fn dlyap(a: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DMatrix<f64>, MpcError> {
    let rho = spectral_radius(a);
    if rho >= 1.0 {
        return Err(MpcError::NotStabilizing { rho });
    }
    let mut s = symmetrize(m);
    let mut ak = a.clone();
    let cap = 256;
    let mut settled = false;
    for _ in 0..cap {
        let term = ak.transpose() * &s * &ak;
        let delta = term.amax();
        s = symmetrize(&(&s + term));
        ak = &ak * &ak;
        if delta <= 1e-16 * (1.0 + s.amax()) {
            settled = true;
            break;
        }
    }
    if !settled {
        return Err(MpcError::NonConvergence { what: "Lyapunov doubling", iterations: cap });
    }
    let resid = (a.transpose() * &s * a + m - &s).amax();
    if resid > 1e-9 * (1.0 + s.amax()) {
        return Err(MpcError::NonConvergence { what: "Lyapunov residual", iterations: cap });
    }
    Ok(s)
}

const COST_STREAM_TAG: u64 = 0x636f_7374; // "cost"
const HORIZON_COST_TAG: u64 = 0x6863_7374; // "hcst"

fn mean_and_se(sum: f64, sumsq: f64, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let mean = sum / nf;
    let var = ((sumsq - nf * mean * mean) / (nf - 1.0)).max(0.0);
    (mean, (var / nf).sqrt())
}

/// Monte Carlo estimate (mean, standard error) of `E[(B_w w)' P (B_w w)]` —
/// the steady-state per-step cost the error channel contributes, i.e. the
/// long-run average-cost bound.
pub fn disturbance_cost_bound(
    sys: &LinearSystem,
    dist: &DisturbanceModel,
    p_cost: &DMatrix<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64), MpcError> {
    if n_samples < 2 {
        return Err(MpcError::InvalidParameter("need at least 2 cost samples".into()));
    }
    let mut rng = derive_rng(seed, COST_STREAM_TAG);
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..n_samples {
        let y = sys.b_w() * dist.sample(&mut rng)?;
        let v = (p_cost * &y).dot(&y);
        sum += v;
        sumsq += v * v;
    }
    Ok(mean_and_se(sum, sumsq, n_samples))
}

/// Monte Carlo estimate (mean, standard error) of the constant the error
/// trajectory adds to the finite-horizon objective:
/// `E[sum_{i=0}^{T-1} e_i' (Q + K'RK) e_i + e_T' P e_T]` with `e_0 = 0` and
/// `e_{i+1} = A_cl e_i + B_w w_i`. Reported alongside the bundle; never
/// optimized over.
pub fn horizon_cost_constant(
    sys: &LinearSystem,
    dist: &DisturbanceModel,
    k_gain: &DMatrix<f64>,
    q_weight: &DMatrix<f64>,
    r_weight: &DMatrix<f64>,
    p_cost: &DMatrix<f64>,
    horizon: usize,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64), MpcError> {
    if n_samples < 2 {
        return Err(MpcError::InvalidParameter("need at least 2 cost samples".into()));
    }
    let a_cl = sys.closed_loop(k_gain);
    let q_err = q_weight + k_gain.transpose() * r_weight * k_gain;
    let mut rng = derive_rng(seed, HORIZON_COST_TAG);
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..n_samples {
        let mut e = DVector::zeros(sys.n());
        let mut total = 0.0;
        for _ in 0..horizon {
            total += (&q_err * &e).dot(&e);
            e = &a_cl * e + sys.b_w() * dist.sample(&mut rng)?;
        }
        total += (p_cost * &e).dot(&e);
        sum += total;
        sumsq += total * total;
    }
    Ok(mean_and_se(sum, sumsq, n_samples))
}

/// Closed form of [`horizon_cost_constant`] for an *untruncated* Gaussian
/// disturbance with covariance `sigma`:
/// `sum_{i=0}^{T-1} tr((Q + K'RK) S_i) + tr(P S_T)` where
/// `S_{i+1} = A_cl S_i A_cl' + B_w sigma B_w'`, `S_0 = 0`.
pub fn horizon_cost_constant_gaussian(
    sys: &LinearSystem,
    k_gain: &DMatrix<f64>,
    q_weight: &DMatrix<f64>,
    r_weight: &DMatrix<f64>,
    p_cost: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    horizon: usize,
) -> f64 {
    let a_cl = sys.closed_loop(k_gain);
    let q_err = q_weight + k_gain.transpose() * r_weight * k_gain;
    let step_cov = sys.b_w() * sigma * sys.b_w().transpose();
    let mut cov = DMatrix::<f64>::zeros(sys.n(), sys.n());
    let mut total = 0.0;
    for _ in 0..horizon {
        total += (&q_err * &cov).trace();
        cov = &a_cl * cov * a_cl.transpose() + &step_cov;
    }
    total + (p_cost * cov).trace()
}

/// The sample plans behind a sampled tightening.
#[derive(Clone, Debug)]
pub struct PlanSet {
    pub state: Vec<SamplePlan>,
    pub input: SamplePlan,
    pub terminal: SamplePlan,
}

/// Every polytope the synthesis produced, plus the fixed-point logs.
#[derive(Clone, Debug)]
pub struct SetCollection {
    /// Invariant terminal set for the closed-loop nominal dynamics.
    pub terminal: Polytope,
    /// Reduced tightened terminal set the online program targets.
    pub z_t: Polytope,
    /// Domain of the finite-horizon program in `(z_0, v_0)`.
    pub c_t: Polytope,
    /// Robustly invariant first-step set (sampled mode only).
    pub c_t_inf: Option<Polytope>,
    /// Feasible initial states: the projection of `c_t_inf` (sampled mode),
    /// of `c_t` (one-step baseline), or that projection fattened by the
    /// invariant tube (worst-case baseline).
    pub region: Polytope,
    /// Invariant error cross-section (worst-case baseline only).
    pub tube: Option<Polytope>,
    pub mrpi_log: IterationLog,
    pub rci_log: Option<IterationLog>,
    pub tube_log: Option<TubeLog>,
}

/// Static part of the online QP over the decision vector `u`: the objective
/// is `u' hess u + (lin_map x)' u + x' const_quad x`, the constraints are
/// `a_rows u <= rhs_base - rhs_map x`.
///
/// In the standard layout `u` is the stacked input sequence
/// `(v_0, ..., v_{T-1})` and the nominal trajectory starts at the measured
/// state. The tube layout prepends the nominal initial state, so
/// `u = (z_0, v_0, ..., v_{T-1})` and the measurement only enters through the
/// rows that pin `x - z_0` inside the invariant tube.
#[derive(Clone, Debug)]
pub struct QpStatic {
    pub hess: DMatrix<f64>,
    pub lin_map: DMatrix<f64>,
    pub const_quad: DMatrix<f64>,
    pub a_rows: DMatrix<f64>,
    pub rhs_base: DVector<f64>,
    pub rhs_map: DMatrix<f64>,
    /// Leading decision coordinates that hold the nominal initial state: 0
    /// for the standard layout, `n` for the tube layout.
    pub z_vars: usize,
}

impl QpStatic {
    /// Expand the horizon dynamics into the stacked form. `first_step` adds
    /// the rows of the joint first-step set when present.
    pub fn build(
        sys: &LinearSystem,
        cons: &ConstraintSpec,
        q_weight: &DMatrix<f64>,
        r_weight: &DMatrix<f64>,
        p_cost: &DMatrix<f64>,
        tight: &Tightening,
        z_t: &Polytope,
        first_step: Option<&Polytope>,
    ) -> Self {
        let n = sys.n();
        let m = sys.m();
        let t = cons.horizon;
        let du = t * m;

        // apow[l] = A^l, smat[l] maps the stacked input to z_l.
        let mut apow = Vec::with_capacity(t + 1);
        apow.push(DMatrix::<f64>::identity(n, n));
        for l in 0..t {
            let next = sys.a() * &apow[l];
            apow.push(next);
        }
        let mut smat = Vec::with_capacity(t + 1);
        smat.push(DMatrix::<f64>::zeros(n, du));
        for l in 0..t {
            let mut next = sys.a() * &smat[l];
            next.view_mut((0, l * m), (n, m)).copy_from(sys.b());
            smat.push(next);
        }

        let mut hess = DMatrix::<f64>::zeros(du, du);
        let mut lin_map = DMatrix::<f64>::zeros(du, n);
        let mut const_quad = q_weight.clone();
        for l in 1..t {
            hess += smat[l].transpose() * q_weight * &smat[l];
            lin_map += smat[l].transpose() * q_weight * &apow[l] * 2.0;
            const_quad += apow[l].transpose() * q_weight * &apow[l];
        }
        hess += smat[t].transpose() * p_cost * &smat[t];
        lin_map += smat[t].transpose() * p_cost * &apow[t] * 2.0;
        const_quad += apow[t].transpose() * p_cost * &apow[t];
        for l in 0..t {
            for i in 0..m {
                for j in 0..m {
                    hess[(l * m + i, l * m + j)] += r_weight[(i, j)];
                }
            }
        }

        let p = cons.num_state_rows();
        let q = cons.num_input_rows();
        let fs_rows = first_step.map_or(0, Polytope::num_rows);
        let total = p * (t - 1) + q * t + z_t.num_rows() + fs_rows;
        let mut a_rows = DMatrix::<f64>::zeros(total, du);
        let mut rhs_base = DVector::<f64>::zeros(total);
        let mut rhs_map = DMatrix::<f64>::zeros(total, n);
        let mut row = 0;
        for l in 1..t {
            a_rows.rows_mut(row, p).copy_from(&(&cons.h * &smat[l]));
            rhs_base.rows_mut(row, p).copy_from(&tight.eta.row(l - 1).transpose());
            rhs_map.rows_mut(row, p).copy_from(&(&cons.h * &apow[l]));
            row += p;
        }
        for l in 0..t {
            a_rows.view_mut((row, l * m), (q, m)).copy_from(&cons.g);
            rhs_base.rows_mut(row, q).copy_from(&tight.mu.row(l).transpose());
            row += q;
        }
        let zr = z_t.num_rows();
        a_rows.rows_mut(row, zr).copy_from(&(z_t.a() * &smat[t]));
        rhs_base.rows_mut(row, zr).copy_from(z_t.b());
        rhs_map.rows_mut(row, zr).copy_from(&(z_t.a() * &apow[t]));
        row += zr;
        if let Some(fs) = first_step {
            let fr = fs.num_rows();
            let fx = fs.a().columns(0, n).into_owned();
            let fv = fs.a().columns(n, m).into_owned();
            a_rows.view_mut((row, 0), (fr, m)).copy_from(&fv);
            rhs_base.rows_mut(row, fr).copy_from(fs.b());
            rhs_map.rows_mut(row, fr).copy_from(&fx);
        }

        QpStatic { hess, lin_map, const_quad, a_rows, rhs_base, rhs_map, z_vars: 0 }
    }

    /// Tube layout over `(z_0, v_0, ..., v_{T-1})`: the nominal initial state
    /// is optimized jointly, its stage cost enters the objective, every
    /// nominal stage (including step 0) obeys the uniformly tightened rows,
    /// and the measured state appears only in `tube.a() (x - z_0) <= tube.b()`.
    ///
    /// Expects a uniform tightening — every row of `tight.eta` and `tight.mu`
    /// identical — so stage 0 can borrow row 0.
    #[allow(clippy::too_many_arguments)]
    pub fn build_tube(
        sys: &LinearSystem,
        cons: &ConstraintSpec,
        q_weight: &DMatrix<f64>,
        r_weight: &DMatrix<f64>,
        p_cost: &DMatrix<f64>,
        tight: &Tightening,
        z_t: &Polytope,
        tube: &Polytope,
    ) -> Self {
        let n = sys.n();
        let m = sys.m();
        let t = cons.horizon;
        let du = n + t * m;

        // mmat[l] maps the decision vector to z_l: [A^l | S_l].
        let mut mmat = Vec::with_capacity(t + 1);
        let mut first = DMatrix::<f64>::zeros(n, du);
        first.view_mut((0, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
        mmat.push(first);
        for l in 0..t {
            let mut next = sys.a() * &mmat[l];
            next.view_mut((0, n + l * m), (n, m)).copy_from(sys.b());
            mmat.push(next);
        }

        let mut hess = DMatrix::<f64>::zeros(du, du);
        for l in 0..t {
            hess += mmat[l].transpose() * q_weight * &mmat[l];
        }
        hess += mmat[t].transpose() * p_cost * &mmat[t];
        for l in 0..t {
            for i in 0..m {
                for j in 0..m {
                    hess[(n + l * m + i, n + l * m + j)] += r_weight[(i, j)];
                }
            }
        }

        let p = cons.num_state_rows();
        let q = cons.num_input_rows();
        let tr = tube.num_rows();
        let total = p * t + q * t + z_t.num_rows() + tr;
        let mut a_rows = DMatrix::<f64>::zeros(total, du);
        let mut rhs_base = DVector::<f64>::zeros(total);
        let mut rhs_map = DMatrix::<f64>::zeros(total, n);
        let mut row = 0;
        for l in 0..t {
            a_rows.rows_mut(row, p).copy_from(&(&cons.h * &mmat[l]));
            let stage = if l == 0 { 0 } else { l - 1 };
            rhs_base.rows_mut(row, p).copy_from(&tight.eta.row(stage).transpose());
            row += p;
        }
        for l in 0..t {
            a_rows.view_mut((row, n + l * m), (q, m)).copy_from(&cons.g);
            rhs_base.rows_mut(row, q).copy_from(&tight.mu.row(l).transpose());
            row += q;
        }
        let zr = z_t.num_rows();
        a_rows.rows_mut(row, zr).copy_from(&(z_t.a() * &mmat[t]));
        rhs_base.rows_mut(row, zr).copy_from(z_t.b());
        row += zr;
        // tube.a() (x - z_0) <= tube.b(), with the assembled right-hand side
        // rhs_base - rhs_map x: put -tube.a() on the z_0 block and +tube.a()
        // into the map.
        a_rows.view_mut((row, 0), (tr, n)).copy_from(&(-tube.a()));
        rhs_base.rows_mut(row, tr).copy_from(tube.b());
        rhs_map.rows_mut(row, tr).copy_from(tube.a());

        QpStatic {
            hess,
            lin_map: DMatrix::zeros(du, n),
            const_quad: DMatrix::zeros(n, n),
            a_rows,
            rhs_base,
            rhs_map,
            z_vars: n,
        }
    }

    pub fn num_rows(&self) -> usize {
        self.a_rows.nrows()
    }

    /// Instantiate the QP at a measured state.
    pub fn assemble(&self, x: &DVector<f64>) -> QpProblem {
        let rhs = &self.rhs_base - &self.rhs_map * x;
        let constraints = Polytope::new(self.a_rows.clone(), rhs)
            .expect("static rows and rhs always agree in size");
        QpProblem {
            hess: self.hess.clone(),
            lin: &self.lin_map * x,
            constant: (&self.const_quad * x).dot(x),
            constraints,
        }
    }
}

/// Everything the offline synthesis produced; sufficient to run the
/// controller and to reproduce the feasible-region comparisons.
#[derive(Clone, Debug)]
pub struct SynthesisBundle {
    pub sys: LinearSystem,
    pub cons: ConstraintSpec,
    pub q_weight: DMatrix<f64>,
    pub r_weight: DMatrix<f64>,
    pub mode: TighteningMode,
    pub beta: f64,
    pub accuracy_band: f64,
    pub seed: u64,
    pub terminal_uses_gain: bool,
    pub k_gain: DMatrix<f64>,
    pub p_dare: DMatrix<f64>,
    pub p_cost: DMatrix<f64>,
    pub plans: Option<PlanSet>,
    pub tight: Tightening,
    pub sets: SetCollection,
    pub w_outer: Polytope,
    /// `E[(B_w w)' P (B_w w)]` estimate and its standard error — the
    /// long-run average-cost bound.
    pub cost_bound: f64,
    pub cost_bound_se: f64,
    /// Constant the error trajectory adds to the finite-horizon objective
    /// (reported, never optimized over) and its standard error.
    pub cost_constant_c: f64,
    pub cost_constant_c_se: f64,
    pub qp: QpStatic,
}

impl SynthesisBundle {
    pub fn horizon(&self) -> usize {
        self.cons.horizon
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SynthesisOptions {
    pub mode: TighteningMode,
    /// Confidence budget for the scenario certificates.
    pub beta: f64,
    /// Multiplicative accuracy band for the certified violation levels.
    pub accuracy_band: f64,
    pub seed: u64,
    /// Sample `[H_T K]_j e_T` for the terminal rows instead of `[H_T]_j e_T`
    /// (requires matching input/state dimensions).
    pub terminal_uses_gain: bool,
    /// Monte Carlo budget for the cost statistics.
    pub cost_mc_samples: usize,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            mode: TighteningMode::Proposed,
            beta: 1e-6,
            accuracy_band: 0.05,
            seed: 0,
            terminal_uses_gain: false,
            cost_mc_samples: 100_000,
        }
    }
}

/// Full offline pipeline: gains, tightenings, sets, static QP, cost constant.
pub fn synthesize(
    sys: &LinearSystem,
    dist: &DisturbanceModel,
    cons: &ConstraintSpec,
    q_weight: &DMatrix<f64>,
    r_weight: &DMatrix<f64>,
    opts: &SynthesisOptions,
) -> Result<SynthesisBundle, MpcError> {
    cons.validate(sys)?;
    if dist.dim() != sys.m_w() {
        return Err(MpcError::InvalidParameter(format!(
            "disturbance dimension {} does not match B_w width {}",
            dist.dim(),
            sys.m_w()
        )));
    }
    if cons.horizon < 2 {
        return Err(MpcError::InvalidParameter(
            "synthesis needs a horizon of at least 2".into(),
        ));
    }
    let t = cons.horizon;

    let (k_gain, p_dare) = lqr_gain(sys, q_weight, r_weight)?;
    let q_err = q_weight + k_gain.transpose() * r_weight * &k_gain;
    let p_cost = dlyap(&sys.closed_loop(&k_gain), &q_err)?;
    let w_outer = dist.outer().clone();

    // Sampled machinery (plans + bank) only for the modes that draw samples.
    let sampled = match opts.mode {
        TighteningMode::Robust => None,
        _ => {
            let mut cache: HashMap<u64, SamplePlan> = HashMap::new();
            let mut plan_for = |eps: f64| -> Result<SamplePlan, MpcError> {
                if let Some(p) = cache.get(&eps.to_bits()) {
                    return Ok(*p);
                }
                let p = sample_plan_banded(eps, opts.beta, opts.accuracy_band)?;
                cache.insert(eps.to_bits(), p);
                Ok(p)
            };
            let state: Vec<SamplePlan> = cons
                .eps
                .iter()
                .map(|&e| plan_for(e))
                .collect::<Result<_, _>>()?;
            let input = plan_for(cons.eps_u)?;
            let terminal = plan_for(cons.eps_t)?;
            let state_max = state.iter().map(|p| p.n_s).max().unwrap_or(0);
            let mut sizes = vec![0usize; t];
            match opts.mode {
                TighteningMode::Proposed => {
                    for size in sizes.iter_mut().take(t - 1) {
                        *size = state_max.max(input.n_s);
                    }
                    sizes[t - 1] = sizes[t - 1].max(terminal.n_s);
                }
                TighteningMode::RfTube => {
                    sizes[0] = state_max.max(input.n_s).max(terminal.n_s);
                }
                TighteningMode::Robust => unreachable!(),
            }
            let bank = ErrorBank::build(sys, &k_gain, dist, &sizes, opts.seed)?;
            Some((PlanSet { state, input, terminal }, bank))
        }
    };

    // Worst-case mode carries its disturbances in an invariant tube instead
    // of sampled quantiles.
    let tube_pair = match opts.mode {
        TighteningMode::Robust => Some(rpi_outer_tube(sys, &k_gain, cons, &w_outer)?),
        _ => None,
    };

    let (eta, mu) = match (&opts.mode, &sampled) {
        (TighteningMode::Proposed, Some((plans, bank))) => (
            tighten_state(cons, &plans.state, bank)?,
            tighten_input(cons, &k_gain, &plans.input, bank)?,
        ),
        (TighteningMode::RfTube, Some((plans, bank))) => (
            tighten_state_rf_tube(sys, &k_gain, cons, &plans.state, bank, &w_outer)?,
            tighten_input_rf_tube(sys, &k_gain, cons, &plans.input, bank, &w_outer)?,
        ),
        (TighteningMode::Robust, _) => {
            let (tube, _) = tube_pair.as_ref().expect("tube precomputed for this mode");
            (
                tighten_state_robust(cons, tube)?,
                tighten_input_robust(cons, &k_gain, tube)?,
            )
        }
        _ => unreachable!(),
    };

    let (terminal_set, mrpi_log) = match opts.mode {
        // Uniform rows already pay for every disturbance, so the terminal
        // recursion runs on the nominal loop with the rows entering directly.
        TighteningMode::Robust => nominal_terminal_invariant(
            sys,
            &k_gain,
            cons,
            &eta.row(0).transpose(),
            &mu.row(0).transpose(),
        )?,
        _ => terminal_invariant(sys, &k_gain, cons, &eta.row(0).transpose(), &w_outer)?,
    };
    let (eta_t, terminal_poly) = match (&opts.mode, &sampled) {
        (TighteningMode::Proposed, Some((plans, bank))) => {
            tighten_terminal(&terminal_set, &k_gain, &plans.terminal, bank, opts.terminal_uses_gain)?
        }
        (TighteningMode::RfTube, Some((plans, bank))) => tighten_terminal_rf_tube(
            sys,
            &k_gain,
            &terminal_set,
            t,
            &plans.terminal,
            bank,
            &w_outer,
        )?,
        // The invariant set is the terminal target as is: membership of the
        // nominal terminal state is what the tube argument needs.
        (TighteningMode::Robust, _) => (terminal_set.b().clone(), terminal_set.clone()),
        _ => unreachable!(),
    };
    let tight = Tightening { eta, mu, eta_t, terminal: terminal_poly };

    let z_t = tight.terminal.reduce().map_err(|e| match e {
        PolyError::Empty => MpcError::Sets(SetsError::Empty { stage: "tightened terminal" }),
        other => MpcError::Poly(other),
    })?;
    let c_t = t_step_set(sys, cons, &tight)?;
    let c_t = match opts.mode {
        // The nominal initial state is a decision in the tube program, so it
        // obeys the tightened state rows like every later stage.
        TighteningMode::Robust => {
            let p = cons.num_state_rows();
            let mut a = DMatrix::zeros(p, sys.n() + sys.m());
            a.view_mut((0, 0), (p, sys.n())).copy_from(&cons.h);
            let rows = Polytope::new(a, tight.eta.row(0).transpose())?;
            c_t.intersect(&rows)?.reduce().map_err(|e| match e {
                PolyError::Empty => {
                    MpcError::Sets(SetsError::Empty { stage: "initial-state rows" })
                }
                other => MpcError::Poly(other),
            })?
        }
        _ => c_t,
    };

    let (c_t_inf, region, rci_log) = match opts.mode {
        TighteningMode::Proposed => {
            let (inv, log) = robust_control_invariant(&c_t, sys, &w_outer)?;
            if !log.converged {
                return Err(MpcError::NonConvergence {
                    what: "first-step invariant set",
                    iterations: log.iterations,
                });
            }
            let region = first_step_region(&inv, sys.n())?;
            (Some(inv), region, Some(log))
        }
        // States the tube program serves: any measurement within the tube of
        // a nominally feasible initial state.
        TighteningMode::Robust => {
            let (tube, _) = tube_pair.as_ref().expect("tube precomputed for this mode");
            let nominal = first_step_region(&c_t, sys.n())?;
            let region = nominal.minkowski_sum(tube)?;
            (None, region, None)
        }
        _ => (None, first_step_region(&c_t, sys.n())?, None),
    };

    let qp = match opts.mode {
        TighteningMode::Robust => {
            let (tube, _) = tube_pair.as_ref().expect("tube precomputed for this mode");
            QpStatic::build_tube(sys, cons, q_weight, r_weight, &p_cost, &tight, &z_t, tube)
        }
        _ => QpStatic::build(
            sys,
            cons,
            q_weight,
            r_weight,
            &p_cost,
            &tight,
            &z_t,
            c_t_inf.as_ref(),
        ),
    };
    let (cost_bound, cost_bound_se) =
        disturbance_cost_bound(sys, dist, &p_cost, opts.cost_mc_samples, opts.seed)?;
    let (cost_constant_c, cost_constant_c_se) = horizon_cost_constant(
        sys,
        dist,
        &k_gain,
        q_weight,
        r_weight,
        &p_cost,
        t,
        opts.cost_mc_samples,
        opts.seed,
    )?;

    let plans = sampled.map(|(p, _)| p);
    let (tube, tube_log) = match tube_pair {
        Some((set, log)) => (Some(set), Some(log)),
        None => (None, None),
    };
    Ok(SynthesisBundle {
        sys: sys.clone(),
        cons: cons.clone(),
        q_weight: q_weight.clone(),
        r_weight: r_weight.clone(),
        mode: opts.mode,
        beta: opts.beta,
        accuracy_band: opts.accuracy_band,
        seed: opts.seed,
        terminal_uses_gain: opts.terminal_uses_gain,
        k_gain,
        p_dare,
        p_cost,
        plans,
        tight,
        sets: SetCollection {
            terminal: terminal_set,
            z_t,
            c_t,
            c_t_inf,
            region,
            tube,
            mrpi_log,
            rci_log,
            tube_log,
        },
        w_outer,
        cost_bound,
        cost_bound_se,
        cost_constant_c,
        cost_constant_c_se,
        qp,
    })
}

/// One solved step of the receding-horizon controller.
#[derive(Clone, Debug)]
pub enum ControlOutcome {
    Optimal(OptimalStep),
    /// The program has no feasible point at this state; the caller decides
    /// the fallback.
    Infeasible,
}

#[derive(Clone, Debug)]
pub struct OptimalStep {
    /// Full optimizer: the stacked inputs `(v_0, ..., v_{T-1})`, preceded by
    /// the nominal initial state in the tube layout.
    pub useq: DVector<f64>,
    /// Applied input: the first input block, plus the gain correction toward
    /// the measured state when the nominal initial state was optimized.
    pub u0: DVector<f64>,
    pub value: f64,
    /// Predicted nominal states `z_0, ..., z_T` (`z_0` is the measured state
    /// in the standard layout, the optimized one in the tube layout).
    pub nominal: Vec<DVector<f64>>,
    pub active_set: Vec<usize>,
}

/// Predicted nominal trajectory under a stacked input sequence.
pub fn nominal_rollout(
    sys: &LinearSystem,
    horizon: usize,
    x: &DVector<f64>,
    useq: &DVector<f64>,
) -> Vec<DVector<f64>> {
    let m = sys.m();
    let mut zs = Vec::with_capacity(horizon + 1);
    zs.push(x.clone());
    for l in 0..horizon {
        let v = useq.rows(l * m, m);
        let next = sys.a() * &zs[l] + sys.b() * v;
        zs.push(next);
    }
    zs
}

/// Assemble and solve the online QP at `x`.
pub fn control_step(
    bundle: &SynthesisBundle,
    x: &DVector<f64>,
    warm: Option<&QpWarmStart>,
) -> Result<ControlOutcome, MpcError> {
    let qp = bundle.qp.assemble(x);
    match solve_qp(&qp, warm, &Tolerances::standard())? {
        QpOutcome::Optimal(sol) => {
            let m = bundle.sys.m();
            let zv = bundle.qp.z_vars;
            let start = if zv == 0 { x.clone() } else { sol.x.rows(0, zv).into_owned() };
            let vseq = sol.x.rows(zv, sol.x.len() - zv).into_owned();
            let mut u0 = vseq.rows(0, m).into_owned();
            if zv > 0 {
                u0 += &bundle.k_gain * (x - &start);
            }
            let nominal = nominal_rollout(&bundle.sys, bundle.horizon(), &start, &vseq);
            Ok(ControlOutcome::Optimal(OptimalStep {
                u0,
                useq: sol.x,
                value: sol.value,
                nominal,
                active_set: sol.active_set,
            }))
        }
        QpOutcome::Infeasible { .. } => Ok(ControlOutcome::Infeasible),
    }
}

/// The classic shifted candidate: drop the applied input, append the terminal
/// controller acting on the predicted terminal state. In the tube layout the
/// nominal initial state also advances one step under its own first input.
pub fn shift_candidate(
    bundle: &SynthesisBundle,
    prev_useq: &DVector<f64>,
    prev_terminal_z: &DVector<f64>,
) -> DVector<f64> {
    let m = bundle.sys.m();
    let t = bundle.horizon();
    let zv = bundle.qp.z_vars;
    let mut cand = DVector::zeros(zv + t * m);
    if zv > 0 {
        let z0 = prev_useq.rows(0, zv);
        let v0 = prev_useq.rows(zv, m);
        cand.rows_mut(0, zv)
            .copy_from(&(bundle.sys.a() * z0 + bundle.sys.b() * v0));
    }
    cand.rows_mut(zv, (t - 1) * m)
        .copy_from(&prev_useq.rows(zv + m, (t - 1) * m));
    cand.rows_mut(zv + (t - 1) * m, m)
        .copy_from(&(&bundle.k_gain * prev_terminal_z));
    cand
}

/// Does a stacked input sequence satisfy the full program at state `x`?
pub fn candidate_feasible(bundle: &SynthesisBundle, x: &DVector<f64>, useq: &DVector<f64>) -> bool {
    let tol = Tolerances::standard();
    let rhs = &bundle.qp.rhs_base - &bundle.qp.rhs_map * x;
    let lhs = &bundle.qp.a_rows * useq;
    (0..rhs.len()).all(|i| lhs[i] <= rhs[i] + tol.feas * (1.0 + rhs[i].abs()))
}
