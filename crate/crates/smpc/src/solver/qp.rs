//! Primal active-set method for strictly convex inequality-constrained QPs.
//!
//! Minimizes `q(x) = x' H x + lin' x + constant` subject to `A x <= b` with
//! `H` symmetric positive definite. The Hessian is Cholesky-factored once per
//! solve; each iteration solves an equality-constrained subproblem on the
//! current working set through the factored form, takes the longest feasible
//! step toward its solution, and adds the blocking row (or drops the row with
//! the most negative multiplier when stationary). The method is warm-startable
//! with a feasible point and a guess of the active set, which is how the
//! receding-horizon loop makes consecutive solves cheap.
//!
//! A cold start without a feasible point runs a phase-1 LP (minimize the
//! largest violation); infeasibility is reported with that LP's positive
//! optimum as certificate.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::lp::{solve_lp, LpOutcome};
use super::{SolverError, Tolerances};
use crate::poly::Polytope;

/// `minimize x' hess x + lin' x + constant  over  constraints`.
///
/// Note the quadratic term is `x' hess x`, not `½ x' hess x`; the gradient is
/// `2 hess x + lin`.
#[derive(Clone, Debug)]
pub struct QpProblem {
    pub hess: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub constant: f64,
    pub constraints: Polytope,
}

/// Feasible point and active-set guess carried over from a previous solve.
#[derive(Clone, Debug)]
pub struct QpWarmStart {
    pub x: DVector<f64>,
    pub active_set: Vec<usize>,
}

#[derive(Clone, Debug)]
pub enum QpOutcome {
    Optimal(QpSolution),
    Infeasible { phase1_objective: f64 },
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub value: f64,
    /// Working set at the optimum, ascending row indices.
    pub active_set: Vec<usize>,
    /// KKT multipliers aligned with `active_set` (nonnegative).
    pub multipliers: DVector<f64>,
    pub iterations: usize,
}

pub fn solve_qp(
    problem: &QpProblem,
    warm: Option<&QpWarmStart>,
    tol: &Tolerances,
) -> Result<QpOutcome, SolverError> {
    let d = problem.hess.nrows();
    if problem.hess.ncols() != d || problem.lin.len() != d || problem.constraints.dim() != d {
        return Err(SolverError::Dimension(format!(
            "hessian {}x{}, linear term {}, constraints in {} dims",
            problem.hess.nrows(),
            problem.hess.ncols(),
            problem.lin.len(),
            problem.constraints.dim()
        )));
    }
    if problem.constraints.is_marked_empty() {
        return Ok(QpOutcome::Infeasible { phase1_objective: f64::INFINITY });
    }
    // Work with the symmetrized gradient map G = 2 H; positive definiteness is
    // checked by factorization success.
    let mut g2 = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            g2[(i, j)] = problem.hess[(i, j)] + problem.hess[(j, i)];
        }
    }
    let chol = Cholesky::new(g2.clone()).ok_or(SolverError::NotPositiveDefinite)?;

    let a = problem.constraints.a();
    let b = problem.constraints.b();
    let r = a.nrows();

    let feasible = |x: &DVector<f64>| -> bool {
        if r == 0 {
            return true;
        }
        let resid = b - a * x;
        (0..r).all(|i| resid[i] >= -tol.feas * (1.0 + b[i].abs()))
    };

    let mut x;
    match warm {
        Some(w) if w.x.len() == d && feasible(&w.x) => x = w.x.clone(),
        _ => match phase_one(problem, tol)? {
            PhaseOne::Feasible(x0) => x = x0,
            PhaseOne::Infeasible(v) => return Ok(QpOutcome::Infeasible { phase1_objective: v }),
        },
    }

    // Working set: active, linearly independent rows. Start from the warm
    // guess (filtered to rows genuinely active at x) or from rows active at
    // the phase-1 point.
    let act_tol = |i: usize| tol.feas.max(1e-7 * (1.0 + b[i].abs()));
    let is_active = |x: &DVector<f64>, i: usize| (b[i] - (a.row(i) * x)[0]).abs() <= act_tol(i);
    let mut work: Vec<usize> = Vec::new();
    {
        let candidates: Vec<usize> = match warm {
            Some(w) if w.x.len() == d => {
                let mut c: Vec<usize> = w.active_set.iter().copied().filter(|&i| i < r).collect();
                c.sort_unstable();
                c.dedup();
                c
            }
            _ => (0..r).collect(),
        };
        let mut ortho: Vec<DVector<f64>> = Vec::new();
        for i in candidates {
            if work.len() == d {
                break;
            }
            if !is_active(&x, i) {
                continue;
            }
            let mut v = a.row(i).transpose();
            for q in &ortho {
                let proj = q.dot(&v);
                v -= q * proj;
            }
            let norm = v.norm();
            if norm > 1e-8 * a.row(i).norm().max(1.0) {
                ortho.push(v / norm);
                work.push(i);
            }
        }
        work.sort_unstable();
    }

    let max_iters = 100 * (d + r);
    let mut multipliers = DVector::zeros(0);
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..max_iters {
        iterations = it + 1;
        let grad = &g2 * &x + &problem.lin;

        // Equality-constrained step on the working set via the factored
        // Hessian: p = -G^{-1}(grad + A_W' lambda), A_W p = 0.
        let k = work.len();
        let p;
        if k == 0 {
            p = -chol.solve(&grad);
            multipliers = DVector::zeros(0);
        } else {
            let mut awt = DMatrix::zeros(d, k);
            for (col, &i) in work.iter().enumerate() {
                awt.set_column(col, &a.row(i).transpose());
            }
            let ginv_awt = chol.solve(&awt);
            let ginv_grad = chol.solve(&grad);
            let s = awt.transpose() * &ginv_awt;
            let rhs = -(awt.transpose() * &ginv_grad);
            let lam = solve_spd_with_fallback(&s, &rhs)?;
            p = -(ginv_grad + &ginv_awt * &lam);
            multipliers = lam;
        }

        let stationary = p.amax() <= 1e-9 * (1.0 + x.amax());
        if stationary {
            if k == 0 {
                converged = true;
                break;
            }
            let (mut min_lam, mut min_idx) = (f64::INFINITY, 0);
            for (idx, &l) in multipliers.iter().enumerate() {
                if l < min_lam {
                    min_lam = l;
                    min_idx = idx;
                }
            }
            if min_lam >= -tol.opt {
                converged = true;
                break;
            }
            work.remove(min_idx);
            continue;
        }

        // Longest feasible step toward the subproblem optimum. A blocking row
        // satisfies a_i' p > 0 with A_W p = 0, so it is automatically
        // independent of the working set.
        let mut alpha = 1.0;
        let mut blocking = None;
        for i in 0..r {
            if work.binary_search(&i).is_ok() {
                continue;
            }
            let api = (a.row(i) * &p)[0];
            if api > tol.pivot {
                let gap = (b[i] - (a.row(i) * &x)[0]).max(0.0);
                let ai = gap / api;
                if ai < alpha - 1e-15 {
                    alpha = ai;
                    blocking = Some(i);
                }
            }
        }
        x += p * alpha;
        if let Some(i) = blocking {
            let pos = work.binary_search(&i).unwrap_err();
            work.insert(pos, i);
        }
    }
    if !converged {
        return Err(SolverError::IterationLimit { phase: "QP active set", limit: max_iters });
    }

    // Certify the result before returning it.
    let grad = &g2 * &x + &problem.lin;
    let mut kkt = grad.clone();
    for (idx, &i) in work.iter().enumerate() {
        kkt += a.row(i).transpose() * multipliers[idx];
    }
    let scale = 1.0 + grad.amax() + problem.lin.amax();
    if kkt.amax() > 1e-7 * scale {
        return Err(SolverError::Numerical(format!(
            "stationarity residual {:.3e} exceeds tolerance",
            kkt.amax()
        )));
    }
    if !feasible(&x) {
        return Err(SolverError::Numerical("returned point violates constraints".into()));
    }
    let value = (&x.transpose() * &problem.hess * &x)[0] + problem.lin.dot(&x) + problem.constant;
    Ok(QpOutcome::Optimal(QpSolution {
        x,
        value,
        active_set: work,
        multipliers,
        iterations,
    }))
}

enum PhaseOne {
    Feasible(DVector<f64>),
    Infeasible(f64),
}

/// Minimize the largest constraint violation: an LP over (x, t) with rows
/// `a_i' x - t <= b_i` and `-t <= 0`, maximizing `-t`.
fn phase_one(problem: &QpProblem, tol: &Tolerances) -> Result<PhaseOne, SolverError> {
    let a = problem.constraints.a();
    let b = problem.constraints.b();
    let (r, d) = (a.nrows(), a.ncols());
    let mut lift_a = DMatrix::zeros(r + 1, d + 1);
    let mut lift_b = DVector::zeros(r + 1);
    for i in 0..r {
        for j in 0..d {
            lift_a[(i, j)] = a[(i, j)];
        }
        lift_a[(i, d)] = -1.0;
        lift_b[i] = b[i];
    }
    lift_a[(r, d)] = -1.0;
    let lifted = Polytope::new(lift_a, lift_b)
        .map_err(|e| SolverError::Dimension(e.to_string()))?;
    let mut c = DVector::zeros(d + 1);
    c[d] = -1.0;
    match solve_lp(&c, &lifted, tol)? {
        LpOutcome::Optimal(s) => {
            let t = s.x[d];
            if t > tol.feas {
                Ok(PhaseOne::Infeasible(t))
            } else {
                Ok(PhaseOne::Feasible(s.x.rows(0, d).into_owned()))
            }
        }
        LpOutcome::Infeasible { phase1_objective } => {
            // The lifted program is feasible by construction for any finite x;
            // reaching this arm means something upstream is numerically off.
            Err(SolverError::Numerical(format!(
                "lifted feasibility program reported infeasible ({phase1_objective:.3e})"
            )))
        }
        LpOutcome::Unbounded { .. } => Err(SolverError::Numerical(
            "lifted feasibility program reported unbounded".into(),
        )),
    }
}

fn solve_spd_with_fallback(
    s: &DMatrix<f64>,
    rhs: &DVector<f64>,
) -> Result<DVector<f64>, SolverError> {
    if let Some(ch) = Cholesky::<f64, Dyn>::new(s.clone()) {
        return Ok(ch.solve(rhs));
    }
    s.clone()
        .lu()
        .solve(rhs)
        .ok_or_else(|| SolverError::Numerical("working-set system is singular".into()))
}
