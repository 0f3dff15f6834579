//! Scenario machinery: certified sample counts, empirical quantiles, error
//! sample banks, and the offline constraint tightenings (the sampled scheme
//! plus the two baselines it is compared against).
//!
//! The statistical core: to enforce `P{a'e <= gamma} >= 1 - eps` with
//! confidence `1 - beta`, draw `n` samples of `a'e`, discard the `r` largest,
//! and use the largest remaining value as `gamma`. The pair `(n, r)` with
//! `r = round(eps n)` is certified by two binomial tail conditions pinning the
//! realized violation level into the band `[0.95 eps, 1.05 eps]`:
//!
//! * `P{Bin(n, 1.05 eps) <= r} <= beta / 2` — discarding `r` of `n` would be
//!   implausibly few if the true violation exceeded the band,
//! * `P{Bin(n, 0.95 eps) >= r} <= beta / 2` — and implausibly many below it.
//!
//! [`sample_plan`] returns the smallest such `n` by upward search; the tail
//! probabilities are summed directly from the extreme end inward in log-anchored
//! arithmetic, with early failure once a partial sum crosses `beta / 2`.

use nalgebra::{DMatrix, DVector, RowDVector};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::model::{derive_rng, ConstraintSpec, DisturbanceModel, LinearSystem, ModelError};
use crate::poly::{PolyError, Polytope};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no certified sample count at or below {cap} for eps={eps}, beta={beta}")]
    NoPlanBelowCap { eps: f64, beta: f64, cap: usize },
    #[error("empty input")]
    EmptyInput,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Poly(#[from] PolyError),
}

/// A certified `(n_s, discard)` pair for one violation level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePlan {
    pub n_s: usize,
    pub discard: usize,
    pub eps: f64,
    pub beta: f64,
    /// Multiplicative band `[lo * eps, hi * eps]` the realized level is
    /// certified to land in.
    pub band: (f64, f64),
}

const BAND_HI: f64 = 1.05;
const PLAN_CAP: usize = 50_000_000;

/// Smallest certified sample count for violation level `eps` at confidence
/// `1 - beta`, with `discard = round(eps * n_s)` and the default accuracy
/// band of 5% around `eps`.
pub fn sample_plan(eps: f64, beta: f64) -> Result<SamplePlan, ScenarioError> {
    sample_plan_banded(eps, beta, BAND_HI - 1.0)
}

/// [`sample_plan`] with an explicit multiplicative accuracy band: the
/// realized violation level is certified to land in
/// `[(1 - band) eps, (1 + band) eps]` with probability at least `1 - beta`.
pub fn sample_plan_banded(eps: f64, beta: f64, band: f64) -> Result<SamplePlan, ScenarioError> {
    if !(0.0 < eps && eps < 1.0) {
        return Err(ScenarioError::InvalidParameter(format!("eps={eps} outside (0, 1)")));
    }
    if !(0.0 < beta && beta < 1.0) {
        return Err(ScenarioError::InvalidParameter(format!("beta={beta} outside (0, 1)")));
    }
    if !(0.0 < band && band < 1.0) {
        return Err(ScenarioError::InvalidParameter(format!(
            "accuracy band {band} outside (0, 1)"
        )));
    }
    let (lo, hi) = (1.0 - band, 1.0 + band);
    if hi * eps >= 1.0 {
        return Err(ScenarioError::InvalidParameter(format!(
            "certification band [{lo}, {hi}] * eps leaves (0, 1)"
        )));
    }
    let half = beta / 2.0;
    for n in 1..=PLAN_CAP {
        let r = (eps * n as f64).round() as usize;
        if r == 0 || r >= n {
            continue;
        }
        if binom_tail_below(n, hi * eps, r, half) && binom_tail_above(n, lo * eps, r, half) {
            return Ok(SamplePlan { n_s: n, discard: r, eps, beta, band: (lo, hi) });
        }
    }
    Err(ScenarioError::NoPlanBelowCap { eps, beta, cap: PLAN_CAP })
}

fn ln_pmf(n: usize, p: f64, i: usize) -> f64 {
    let (nf, ifl) = (n as f64, i as f64);
    ln_gamma(nf + 1.0) - ln_gamma(ifl + 1.0) - ln_gamma(nf - ifl + 1.0)
        + ifl * p.ln()
        + (nf - ifl) * (1.0 - p).ln()
}

/// `P{Bin(n, p) <= r} <= bound`? Sums from `i = r` downward (terms decay
/// geometrically below the mean) and fails fast once the partial sum crosses
/// the bound.
fn binom_tail_below(n: usize, p: f64, r: usize, bound: f64) -> bool {
    let mut term = ln_pmf(n, p, r).exp();
    let mut sum = 0.0;
    let q = 1.0 - p;
    let mut i = r;
    loop {
        sum += term;
        if sum > bound {
            return false;
        }
        if i == 0 || term < 1e-18 * bound.max(sum) {
            return true;
        }
        // pmf(i-1) = pmf(i) * i (1-p) / ((n - i + 1) p)
        term *= (i as f64) * q / (((n - i + 1) as f64) * p);
        i -= 1;
    }
}

/// `P{Bin(n, p) >= r} <= bound`? Sums from `i = r` upward.
fn binom_tail_above(n: usize, p: f64, r: usize, bound: f64) -> bool {
    let mut term = ln_pmf(n, p, r).exp();
    let mut sum = 0.0;
    let q = 1.0 - p;
    let mut i = r;
    loop {
        sum += term;
        if sum > bound {
            return false;
        }
        if i == n || term < 1e-18 * bound.max(sum) {
            return true;
        }
        // pmf(i+1) = pmf(i) * (n - i) p / ((i + 1)(1-p))
        term *= ((n - i) as f64) * p / (((i + 1) as f64) * q);
        i += 1;
    }
}

/// Exact tail values, used for reporting and cross-checks.
pub fn binom_cdf(n: usize, p: f64, r: usize) -> f64 {
    let mut term = ln_pmf(n, p, r).exp();
    if term == 0.0 {
        // The starting mass underflowed, so the cdf is 0 or 1 to within
        // n * f64::MIN_POSITIVE; the side of the mean decides which.
        return if (r as f64) < n as f64 * p { 0.0 } else { 1.0 };
    }
    let mut sum = 0.0;
    let q = 1.0 - p;
    let mut i = r;
    loop {
        sum += term;
        if i == 0 || term < 1e-18 * sum {
            return sum.min(1.0);
        }
        term *= (i as f64) * q / (((n - i + 1) as f64) * p);
        i -= 1;
    }
}

/// Empirical quantile: the `ceil(level * n)`-th smallest value (1-based), with
/// an epsilon guard so that exact multiples of `1/n` do not round up a rank.
pub fn quantile(values: &[f64], level: f64) -> Result<f64, ScenarioError> {
    if values.is_empty() {
        return Err(ScenarioError::EmptyInput);
    }
    if !(0.0 < level && level <= 1.0) {
        return Err(ScenarioError::InvalidParameter(format!("level={level} outside (0, 1]")));
    }
    let n = values.len();
    let rank = (level * n as f64 - 1e-9).ceil().max(1.0) as usize;
    let rank = rank.min(n);
    let mut v = values.to_vec();
    let (_, kth, _) = v.select_nth_unstable_by(rank - 1, |a, b| a.total_cmp(b));
    Ok(*kth)
}

/// Sampled error-channel states, one matrix per prediction step: column `i` of
/// `step(l)` is an independent draw of `e_l`. Each step has its own derived
/// stream, so resizing one step never perturbs another — schemes that sample
/// only `e_1` see exactly the same columns as schemes that sample every step.
#[derive(Clone, Debug)]
pub struct ErrorBank {
    steps: Vec<DMatrix<f64>>,
}

const BANK_STREAM_TAG: u64 = 0x6261_6e6b; // "bank"

impl ErrorBank {
    /// `sizes[l-1]` columns for step `l`; a zero size skips that step.
    pub fn build(
        sys: &LinearSystem,
        k_gain: &DMatrix<f64>,
        dist: &DisturbanceModel,
        sizes: &[usize],
        seed: u64,
    ) -> Result<Self, ScenarioError> {
        let a_cl = sys.closed_loop(k_gain);
        let n = sys.n();
        let mut steps = Vec::with_capacity(sizes.len());
        for (idx, &count) in sizes.iter().enumerate() {
            let l = idx + 1;
            let mut rng = derive_rng(seed, BANK_STREAM_TAG + l as u64);
            let mut mat = DMatrix::zeros(n, count);
            let mut e = DVector::zeros(n);
            for c in 0..count {
                e.fill(0.0);
                for _ in 0..l {
                    let w = dist.sample(&mut rng)?;
                    e = &a_cl * e + sys.b_w() * w;
                }
                mat.set_column(c, &e);
            }
            steps.push(mat);
        }
        Ok(ErrorBank { steps })
    }

    pub fn from_steps(steps: Vec<DMatrix<f64>>) -> Self {
        ErrorBank { steps }
    }

    /// Samples of `e_l` (columns), `l` counted from 1.
    pub fn step(&self, l: usize) -> &DMatrix<f64> {
        &self.steps[l - 1]
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }
}

/// Offsets after tightening: state rows for steps `1..horizon-1`, input rows
/// for steps `0..horizon-1` (step 0 is the untightened hard constraint), and
/// the terminal rows with the set they carve out.
#[derive(Clone, Debug)]
pub struct Tightening {
    /// `(horizon - 1) x p`; row `l-1` holds the step-`l` state offsets.
    pub eta: DMatrix<f64>,
    /// `horizon x q`; row `l` holds the step-`l` input offsets, row 0 = `g`.
    pub mu: DMatrix<f64>,
    /// Tightened terminal offsets, aligned with the terminal facet rows.
    pub eta_t: DVector<f64>,
    /// `{x : H_T x <= eta_t}`, rows aligned with `eta_t` (not reduced).
    pub terminal: Polytope,
}

fn row_quantile_offset(
    offsets: &DVector<f64>,
    projections: &RowDVector<f64>,
    j: usize,
    plan: &SamplePlan,
) -> Result<f64, ScenarioError> {
    if projections.len() < plan.n_s {
        return Err(ScenarioError::InvalidParameter(format!(
            "bank holds {} samples, plan needs {}",
            projections.len(),
            plan.n_s
        )));
    }
    let slice = &projections.as_slice()[..plan.n_s];
    let level = 1.0 - plan.discard as f64 / plan.n_s as f64;
    Ok(offsets[j] - quantile(slice, level)?)
}

/// Sampled state tightening: `eta_l[j] = h_j - gamma_l[j]` where `gamma` is
/// the certified quantile of `[H]_j e_l` under `plans[j]`.
pub fn tighten_state(
    cons: &ConstraintSpec,
    plans: &[SamplePlan],
    bank: &ErrorBank,
) -> Result<DMatrix<f64>, ScenarioError> {
    let p = cons.num_state_rows();
    if plans.len() != p {
        return Err(ScenarioError::InvalidParameter(format!(
            "{} plans for {} state rows",
            plans.len(),
            p
        )));
    }
    let t = cons.horizon;
    let mut eta = DMatrix::zeros(t.saturating_sub(1), p);
    for l in 1..t {
        for j in 0..p {
            let proj = cons.h.row(j) * bank.step(l);
            eta[(l - 1, j)] = row_quantile_offset(&cons.h_off, &proj, j, &plans[j])?;
        }
    }
    Ok(eta)
}

/// Sampled input tightening for `u = v + K e`: row 0 is `g` itself (no error
/// has accumulated at the first applied input), later rows subtract the
/// quantile of `[G K]_j e_l`.
pub fn tighten_input(
    cons: &ConstraintSpec,
    k_gain: &DMatrix<f64>,
    plan: &SamplePlan,
    bank: &ErrorBank,
) -> Result<DMatrix<f64>, ScenarioError> {
    let q = cons.num_input_rows();
    let t = cons.horizon;
    let gk = &cons.g * k_gain;
    let mut mu = DMatrix::zeros(t, q);
    for j in 0..q {
        mu[(0, j)] = cons.g_off[j];
    }
    for l in 1..t {
        for j in 0..q {
            let proj = gk.row(j) * bank.step(l);
            mu[(l, j)] = row_quantile_offset(&cons.g_off, &proj, j, plan)?;
        }
    }
    Ok(mu)
}

/// Sampled terminal tightening: offsets of the terminal set's facets eroded by
/// the quantile of the horizon-step error projected on each facet normal.
///
/// `use_gain` switches to sampling `[H_T K]_j e_T` instead of `[H_T]_j e_T`,
/// which types-check only when the input and state dimensions agree.
pub fn tighten_terminal(
    terminal_raw: &Polytope,
    k_gain: &DMatrix<f64>,
    plan: &SamplePlan,
    bank: &ErrorBank,
    use_gain: bool,
) -> Result<(DVector<f64>, Polytope), ScenarioError> {
    let t = bank.horizon();
    let errors = bank.step(t);
    let rows = if use_gain {
        if k_gain.nrows() != terminal_raw.dim() {
            return Err(ScenarioError::InvalidParameter(
                "gain-weighted terminal tightening needs matching input/state dimensions".into(),
            ));
        }
        terminal_raw.a() * k_gain
    } else {
        terminal_raw.a().clone()
    };
    let mut eta_t = DVector::zeros(terminal_raw.num_rows());
    for j in 0..terminal_raw.num_rows() {
        let proj = rows.row(j) * errors;
        eta_t[j] = row_quantile_offset(terminal_raw.b(), &proj, j, plan)?;
    }
    let poly = Polytope::new(terminal_raw.a().clone(), eta_t.clone())?;
    Ok((eta_t, poly))
}

/// Closed-form covariance of the step-`l` tracking error when the disturbance
/// is gaussian with covariance `sigma` and no truncation:
/// `sum_{i=0}^{l-1} A_cl^i B_w sigma B_w' (A_cl^i)'`.
pub fn gaussian_error_covariance(
    sys: &LinearSystem,
    k_gain: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    l: usize,
) -> DMatrix<f64> {
    let a_cl = sys.closed_loop(k_gain);
    let base = sys.b_w() * sigma * sys.b_w().transpose();
    let mut cov = DMatrix::zeros(sys.n(), sys.n());
    let mut pow = DMatrix::<f64>::identity(sys.n(), sys.n());
    for _ in 0..l {
        cov += &pow * &base * pow.transpose();
        pow = &a_cl * pow;
    }
    cov
}

/// Untruncated-gaussian surrogate for one sampled state offset: the step-`l`
/// projection `[H]_j e_l` is exactly normal with a closed-form variance, so
/// the tightened offset is `h_j - sigma_lj * Phi^{-1}(1 - eps_j)`.
///
/// This is the analytic cross-check for [`tighten_state`]; with the
/// truncation radius pushed far out the two must agree up to sampling error.
pub fn analytic_gaussian_offset(
    sys: &LinearSystem,
    k_gain: &DMatrix<f64>,
    cons: &ConstraintSpec,
    sigma: &DMatrix<f64>,
    l: usize,
    j: usize,
) -> Result<f64, ScenarioError> {
    if l == 0 {
        return Err(ScenarioError::InvalidParameter(
            "step 0 carries no error; offsets start at l = 1".into(),
        ));
    }
    if j >= cons.num_state_rows() {
        return Err(ScenarioError::InvalidParameter(format!(
            "row {j} out of {} state rows",
            cons.num_state_rows()
        )));
    }
    let cov = gaussian_error_covariance(sys, k_gain, sigma, l);
    let row = cons.h.row(j);
    let var = (row * &cov * row.transpose())[(0, 0)];
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Ok(cons.h_off[j] - var.max(0.0).sqrt() * normal.inverse_cdf(1.0 - cons.eps[j]))
}

/// `sum_{i=lo}^{hi} h_W(B_w' (A_cl^i)' dir)` — the worst-case accumulation of
/// `i`-step-old disturbances along a constraint normal.
pub fn worst_case_accumulation(
    sys: &LinearSystem,
    k_gain: &DMatrix<f64>,
    w_outer: &Polytope,
    dir: &DVector<f64>,
    lo: usize,
    hi: usize,
) -> Result<f64, ScenarioError> {
    let a_cl_t = sys.closed_loop(k_gain).transpose();
    let mut v = dir.clone();
    for _ in 0..lo {
        v = &a_cl_t * v;
    }
    let mut total = 0.0;
    for _ in lo..=hi {
        total += w_outer.support(&(sys.b_w().transpose() * &v))?;
        v = &a_cl_t * v;
    }
    Ok(total)
}

/// Pure worst-case tightening: every state row gives up the support of the
/// invariant tube along its normal, identically at every step, because the
/// tracking error is confined to the tube from step zero on.
pub fn tighten_state_robust(
    cons: &ConstraintSpec,
    tube: &Polytope,
) -> Result<DMatrix<f64>, ScenarioError> {
    let p = cons.num_state_rows();
    let t = cons.horizon;
    let mut eta = DMatrix::zeros(t.saturating_sub(1), p);
    for j in 0..p {
        let dir = cons.h.row(j).transpose();
        let margin = cons.h_off[j] - tube.support(&dir)?;
        for l in 1..t {
            eta[(l - 1, j)] = margin;
        }
    }
    Ok(eta)
}

/// Tube baseline: a certified one-step quantile absorbs the newest
/// disturbance, all older ones are treated adversarially. Its step-1 row uses
/// the same samples and the same quantile rule as the sampled scheme, so the
/// two schemes coincide at `l = 1` by construction.
pub fn tighten_state_rf_tube(
    sys: &LinearSystem,
    k_gain: &DMatrix<f64>,
    cons: &ConstraintSpec,
    plans: &[SamplePlan],
    bank: &ErrorBank,
    w_outer: &Polytope,
) -> Result<DMatrix<f64>, ScenarioError> {
    let p = cons.num_state_rows();
    if plans.len() != p {
        return Err(ScenarioError::InvalidParameter(format!(
            "{} plans for {} state rows",
            plans.len(),
            p
        )));
    }
    let t = cons.horizon;
    let mut eta = DMatrix::zeros(t.saturating_sub(1), p);
    for j in 0..p {
        let proj = cons.h.row(j) * bank.step(1);
        let one_step = cons.h_off[j] - row_quantile_offset(&cons.h_off, &proj, j, &plans[j])?;
        let dir = cons.h.row(j).transpose();
        for l in 1..t {
            let tail = if l >= 2 {
                worst_case_accumulation(sys, k_gain, w_outer, &dir, 1, l - 1)?
            } else {
                0.0
            };
            eta[(l - 1, j)] = cons.h_off[j] - one_step - tail;
        }
    }
    Ok(eta)
}

/// Worst-case input tightening: the tube is measured under the gain. Unlike
/// the sampled schemes the first row erodes too — the plan that pairs with
/// this tightening lets the nominal initial state float away from the
/// measured one, so even the first applied input carries a correction.
pub fn tighten_input_robust(
    cons: &ConstraintSpec,
    k_gain: &DMatrix<f64>,
    tube: &Polytope,
) -> Result<DMatrix<f64>, ScenarioError> {
    let q = cons.num_input_rows();
    let t = cons.horizon;
    let gk = &cons.g * k_gain;
    let mut mu = DMatrix::zeros(t, q);
    for j in 0..q {
        let dir = gk.row(j).transpose();
        let margin = cons.g_off[j] - tube.support(&dir)?;
        for l in 0..t {
            mu[(l, j)] = margin;
        }
    }
    Ok(mu)
}

/// Tube-baseline input tightening: one-step quantile plus worst-case tail.
pub fn tighten_input_rf_tube(
    sys: &LinearSystem,
    k_gain: &DMatrix<f64>,
    cons: &ConstraintSpec,
    plan: &SamplePlan,
    bank: &ErrorBank,
    w_outer: &Polytope,
) -> Result<DMatrix<f64>, ScenarioError> {
    let q = cons.num_input_rows();
    let t = cons.horizon;
    let gk = &cons.g * k_gain;
    let mut mu = DMatrix::zeros(t, q);
    for j in 0..q {
        mu[(0, j)] = cons.g_off[j];
        let proj = gk.row(j) * bank.step(1);
        let one_step = cons.g_off[j] - row_quantile_offset(&cons.g_off, &proj, j, plan)?;
        let dir = gk.row(j).transpose();
        for l in 1..t {
            let tail = if l >= 2 {
                worst_case_accumulation(sys, k_gain, w_outer, &dir, 1, l - 1)?
            } else {
                0.0
            };
            mu[(l, j)] = cons.g_off[j] - one_step - tail;
        }
    }
    Ok(mu)
}

/// Tube-baseline terminal erosion: one-step quantile at the terminal level
/// plus the worst-case tail.
pub fn tighten_terminal_rf_tube(
    sys: &LinearSystem,
    k_gain: &DMatrix<f64>,
    terminal_raw: &Polytope,
    horizon: usize,
    plan: &SamplePlan,
    bank: &ErrorBank,
    w_outer: &Polytope,
) -> Result<(DVector<f64>, Polytope), ScenarioError> {
    let errors = bank.step(1);
    let mut eta_t = DVector::zeros(terminal_raw.num_rows());
    for j in 0..terminal_raw.num_rows() {
        let proj = terminal_raw.a().row(j) * errors;
        let one_step =
            terminal_raw.b()[j] - row_quantile_offset(terminal_raw.b(), &proj, j, plan)?;
        let dir = terminal_raw.a().row(j).transpose();
        let tail = if horizon >= 2 {
            worst_case_accumulation(sys, k_gain, w_outer, &dir, 1, horizon - 1)?
        } else {
            0.0
        };
        eta_t[j] = terminal_raw.b()[j] - one_step - tail;
    }
    let poly = Polytope::new(terminal_raw.a().clone(), eta_t.clone())?;
    Ok((eta_t, poly))
}
