//! Closed-loop Monte Carlo engine: trajectory rollout, violation statistics,
//! refeasibility auditing, and the long-run average-cost check.
//!
//! Every run is a pure function of `(bundle, x0, steps, run_seed)`; batches
//! derive run seeds as `base_seed + run_index` and collect in index order, so
//! results are identical for any worker count.

use nalgebra::DVector;
use rayon::prelude::*;
use thiserror::Error;

use crate::model::{derive_rng, DisturbanceModel, ModelError};
use crate::mpc::{candidate_feasible, control_step, shift_candidate, ControlOutcome, MpcError, SynthesisBundle};
use crate::poly::{PolyError, Polytope};
use crate::solver::QpWarmStart;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

const SIM_STREAM_TAG: u64 = 0x7369_6d77; // "simw"

/// Outcome of one applied control step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepStatus {
    Optimal,
    /// The QP had no feasible point; the audited fallback `u = Kx` was
    /// applied instead.
    Infeasible,
}

impl StepStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepStatus::Optimal => "OPTIMAL",
            StepStatus::Infeasible => "INFEASIBLE",
        }
    }
}

/// One closed-loop realization.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub seed: u64,
    /// `x_0 .. x_steps`.
    pub xs: Vec<DVector<f64>>,
    /// `u_0 .. u_{steps-1}` as applied.
    pub us: Vec<DVector<f64>>,
    pub statuses: Vec<StepStatus>,
    /// Per state `x_k` (including `x_0` and the final state), per constraint
    /// row: `[H x_k]_j > h_j`.
    pub violations: Vec<Vec<bool>>,
    /// `x_k' Q x_k + u_k' R u_k` per applied step.
    pub stage_costs: Vec<f64>,
    /// For `k >= 1` and a previous optimal solve: was the shifted previous
    /// sequence feasible for the time-`k` program? `None` when there was
    /// nothing to shift.
    pub prev_feasible: Vec<Option<bool>>,
}

fn violation_flags(bundle: &SynthesisBundle, x: &DVector<f64>) -> Vec<bool> {
    let h = &bundle.cons.h;
    let off = &bundle.cons.h_off;
    let v = h * x;
    (0..v.len()).map(|j| v[j] > off[j]).collect()
}

/// Roll the plant `steps` times under the receding-horizon controller.
///
/// On an infeasible QP the run records the status, applies the audited
/// fallback `u = Kx`, and keeps going — baseline modes without a
/// recursive-feasibility certificate stay measurable.
pub fn closed_loop_run(
    bundle: &SynthesisBundle,
    dist: &DisturbanceModel,
    x0: &DVector<f64>,
    steps: usize,
    run_seed: u64,
) -> Result<RunRecord, SimError> {
    if steps == 0 {
        return Err(SimError::InvalidParameter("steps must be at least 1".into()));
    }
    let mut rng = derive_rng(run_seed, SIM_STREAM_TAG);
    let mut xs = Vec::with_capacity(steps + 1);
    let mut us = Vec::with_capacity(steps);
    let mut statuses = Vec::with_capacity(steps);
    let mut violations = Vec::with_capacity(steps + 1);
    let mut stage_costs = Vec::with_capacity(steps);
    let mut prev_feasible = Vec::with_capacity(steps);

    let mut x = x0.clone();
    let mut prev: Option<(DVector<f64>, DVector<f64>)> = None; // (useq, z_T)
    let mut warm: Option<QpWarmStart> = None;
    for _ in 0..steps {
        violations.push(violation_flags(bundle, &x));
        prev_feasible.push(prev.as_ref().map(|(useq, zt)| {
            candidate_feasible(bundle, &x, &shift_candidate(bundle, useq, zt))
        }));

        let (u, status) = match control_step(bundle, &x, warm.as_ref())? {
            ControlOutcome::Optimal(step) => {
                let cand = shift_candidate(bundle, &step.useq, &step.nominal[bundle.horizon()]);
                warm = Some(QpWarmStart { x: cand, active_set: step.active_set.clone() });
                prev = Some((step.useq.clone(), step.nominal[bundle.horizon()].clone()));
                (step.u0, StepStatus::Optimal)
            }
            ControlOutcome::Infeasible => {
                warm = None;
                prev = None;
                (&bundle.k_gain * &x, StepStatus::Infeasible)
            }
        };
        stage_costs.push((&bundle.q_weight * &x).dot(&x) + (&bundle.r_weight * &u).dot(&u));
        let w = dist.sample(&mut rng)?;
        let next = bundle.sys.a() * &x + bundle.sys.b() * &u + bundle.sys.b_w() * w;
        xs.push(x);
        us.push(u);
        statuses.push(status);
        x = next;
    }
    violations.push(violation_flags(bundle, &x));
    xs.push(x);

    Ok(RunRecord { seed: run_seed, xs, us, statuses, violations, stage_costs, prev_feasible })
}

/// Pure prestabilized rollout `u = Kx` (no MPC), on the same disturbance
/// stream `closed_loop_run` would use for the same seed.
pub fn lqr_rollout(
    bundle: &SynthesisBundle,
    dist: &DisturbanceModel,
    x0: &DVector<f64>,
    steps: usize,
    run_seed: u64,
) -> Result<Vec<DVector<f64>>, SimError> {
    let mut rng = derive_rng(run_seed, SIM_STREAM_TAG);
    let mut xs = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    for _ in 0..steps {
        let u = &bundle.k_gain * &x;
        let w = dist.sample(&mut rng)?;
        let next = bundle.sys.a() * &x + bundle.sys.b() * &u + bundle.sys.b_w() * w;
        xs.push(x);
        x = next;
    }
    xs.push(x);
    Ok(xs)
}

/// Run `n_runs` independent realizations with seeds `base_seed + i`.
///
/// `workers = 1` stays on the calling thread; larger counts fan out over a
/// dedicated pool. Either way the output order and content depend only on
/// the seeds.
pub fn run_many(
    bundle: &SynthesisBundle,
    dist: &DisturbanceModel,
    x0: &DVector<f64>,
    steps: usize,
    n_runs: usize,
    base_seed: u64,
    workers: usize,
) -> Result<Vec<RunRecord>, SimError> {
    if workers <= 1 {
        return (0..n_runs)
            .map(|i| closed_loop_run(bundle, dist, x0, steps, base_seed + i as u64))
            .collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| SimError::InvalidParameter(format!("worker pool: {e}")))?;
    pool.install(|| {
        (0..n_runs)
            .into_par_iter()
            .map(|i| closed_loop_run(bundle, dist, x0, steps, base_seed + i as u64))
            .collect()
    })
}

/// Aggregated violation and refeasibility statistics over a batch of runs.
#[derive(Clone, Debug)]
pub struct ViolationStats {
    pub n_runs: usize,
    pub steps: usize,
    /// `freq[k - 1][j]`: violation frequency of state row `j` at step `k`
    /// (`k` counted from 1; the deterministic initial state is excluded).
    pub freq: Vec<Vec<f64>>,
    pub ci_lo: Vec<Vec<f64>>,
    pub ci_hi: Vec<Vec<f64>>,
    /// Inclusive step window the row averages are taken over.
    pub window: (usize, usize),
    /// Per-row mean of the per-step frequencies across the window.
    pub window_avg: Vec<f64>,
    /// Fraction of audited steps where the shifted previous sequence was
    /// infeasible.
    pub eps_f: f64,
    /// Number of audited (run, step) pairs behind `eps_f`.
    pub eps_f_pairs: usize,
    pub ci_method: &'static str,
}

/// Two-sided 95% Wilson score interval.
fn wilson_95(p_hat: f64, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054_f64;
    let nf = n as f64;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p_hat + z2 / (2.0 * nf)) / denom;
    let half = z * (p_hat * (1.0 - p_hat) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

impl ViolationStats {
    /// `window` is the inclusive `(first, last)` step range for the averaged
    /// rates, clamped to the available steps.
    pub fn from_records(records: &[RunRecord], window: (usize, usize)) -> Result<Self, SimError> {
        let n_runs = records.len();
        if n_runs == 0 {
            return Err(SimError::InvalidParameter("no runs to aggregate".into()));
        }
        let steps = records[0].us.len();
        let rows = records[0].violations[0].len();
        if records.iter().any(|r| r.us.len() != steps || r.violations.len() != steps + 1) {
            return Err(SimError::InvalidParameter("runs have mixed lengths".into()));
        }

        let mut freq = vec![vec![0.0; rows]; steps];
        for r in records {
            for k in 1..=steps {
                for j in 0..rows {
                    if r.violations[k][j] {
                        freq[k - 1][j] += 1.0;
                    }
                }
            }
        }
        let mut ci_lo = vec![vec![0.0; rows]; steps];
        let mut ci_hi = vec![vec![0.0; rows]; steps];
        for k in 0..steps {
            for j in 0..rows {
                freq[k][j] /= n_runs as f64;
                let (lo, hi) = wilson_95(freq[k][j], n_runs);
                ci_lo[k][j] = lo;
                ci_hi[k][j] = hi;
            }
        }

        let lo = window.0.max(1);
        let hi = window.1.min(steps);
        if lo > hi {
            return Err(SimError::InvalidParameter(format!(
                "window {window:?} is empty for {steps} steps"
            )));
        }
        let mut window_avg = vec![0.0; rows];
        for j in 0..rows {
            let sum: f64 = (lo..=hi).map(|k| freq[k - 1][j]).sum();
            window_avg[j] = sum / (hi - lo + 1) as f64;
        }

        let mut pairs = 0usize;
        let mut failures = 0usize;
        for r in records {
            for flag in r.prev_feasible.iter().flatten() {
                pairs += 1;
                if !flag {
                    failures += 1;
                }
            }
        }
        let eps_f = if pairs == 0 { 0.0 } else { failures as f64 / pairs as f64 };

        Ok(ViolationStats {
            n_runs,
            steps,
            freq,
            ci_lo,
            ci_hi,
            window: (lo, hi),
            window_avg,
            eps_f,
            eps_f_pairs: pairs,
            ci_method: "wilson-95",
        })
    }
}

/// Long-run average state cost against the disturbance cost bound.
#[derive(Clone, Copy, Debug)]
pub struct AverageCostReport {
    /// Mean over runs of the per-run average of `x_k' Q x_k` after the
    /// transient.
    pub empirical_mean: f64,
    pub empirical_se: f64,
    pub bound: f64,
    pub bound_se: f64,
    pub discarded_steps: usize,
    /// `empirical <= bound + 3 * combined standard error`.
    pub pass: bool,
}

/// Compare the empirical long-run average of `x' Q x` (first `discard` steps
/// dropped as transient) against the bundle's Monte Carlo bound
/// `E[(B_w w)' P (B_w w)]`.
pub fn average_cost_check(
    bundle: &SynthesisBundle,
    records: &[RunRecord],
    discard: usize,
) -> Result<AverageCostReport, SimError> {
    if records.is_empty() {
        return Err(SimError::InvalidParameter("no runs to check".into()));
    }
    let mut run_means = Vec::with_capacity(records.len());
    for r in records {
        if r.xs.len() <= discard + 1 {
            return Err(SimError::InvalidParameter(format!(
                "runs of {} steps cannot discard {discard}",
                r.xs.len() - 1
            )));
        }
        let tail = &r.xs[discard..];
        let sum: f64 = tail.iter().map(|x| (&bundle.q_weight * x).dot(x)).sum();
        run_means.push(sum / tail.len() as f64);
    }
    let nf = run_means.len() as f64;
    let mean = run_means.iter().sum::<f64>() / nf;
    let se = if run_means.len() < 2 {
        0.0
    } else {
        let var = run_means.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0);
        (var / nf).sqrt()
    };
    let combined = (se * se + bundle.cost_bound_se * bundle.cost_bound_se).sqrt();
    Ok(AverageCostReport {
        empirical_mean: mean,
        empirical_se: se,
        bound: bundle.cost_bound,
        bound_se: bundle.cost_bound_se,
        discarded_steps: discard,
        pass: mean <= bundle.cost_bound + 3.0 * combined,
    })
}

/// Grid cross-check of a 2-D polytope area: count `resolution x resolution`
/// cell centers of the bounding box that lie inside.
pub fn grid_area(region: &Polytope, resolution: usize) -> Result<f64, SimError> {
    if region.dim() != 2 {
        return Err(SimError::InvalidParameter("grid area needs a 2-D set".into()));
    }
    if resolution == 0 {
        return Err(SimError::InvalidParameter("resolution must be positive".into()));
    }
    let e0 = DVector::from_row_slice(&[1.0, 0.0]);
    let e1 = DVector::from_row_slice(&[0.0, 1.0]);
    let hi_x = region.support(&e0)?;
    let lo_x = -region.support(&(-&e0))?;
    let hi_y = region.support(&e1)?;
    let lo_y = -region.support(&(-&e1))?;
    let dx = (hi_x - lo_x) / resolution as f64;
    let dy = (hi_y - lo_y) / resolution as f64;
    let mut count = 0usize;
    let mut pt = DVector::zeros(2);
    for i in 0..resolution {
        pt[0] = lo_x + (i as f64 + 0.5) * dx;
        for j in 0..resolution {
            pt[1] = lo_y + (j as f64 + 0.5) * dy;
            if region.contains(&pt, 0.0) {
                count += 1;
            }
        }
    }
    Ok(count as f64 * dx * dy)
}
