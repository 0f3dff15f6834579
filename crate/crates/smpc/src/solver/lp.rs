//! Two-phase revised simplex for dense LPs over halfspace-represented sets.
//!
//! Problems arrive as `maximize c'x subject to A x <= b` with `x` free. The
//! solver converts to standard form (variable split `x = xp - xn`, one slack
//! per row, artificials only for rows whose right-hand side had to be
//! negated), runs phase 1 to find a basic feasible point, then phase 2 on the
//! true objective. The basis inverse is kept explicitly and updated by
//! elementary row operations, with periodic refactorization from scratch.
//!
//! Pivoting is Dantzig's rule with a fixed lowest-index tie-break, falling
//! back to Bland's rule once a run of degenerate pivots exceeds `10 * rows`,
//! so the method terminates and every solve is reproducible bit-for-bit.

use nalgebra::{DMatrix, DVector, RowDVector};

use super::{SolverError, Tolerances};
use crate::poly::Polytope;

/// Result of an LP solve: a certified optimum, a certificate of infeasibility
/// (the positive phase-1 optimum), or an unbounded improving ray.
#[derive(Clone, Debug)]
pub enum LpOutcome {
    Optimal(LpSolution),
    Infeasible { phase1_objective: f64 },
    Unbounded { ray: DVector<f64> },
}

#[derive(Clone, Debug)]
pub struct LpSolution {
    pub x: DVector<f64>,
    pub value: f64,
    /// Dual multipliers of the `<=` rows (nonnegative at optimality).
    pub dual: DVector<f64>,
    /// Rows active at the returned point, ascending.
    pub active_rows: Vec<usize>,
}

/// Maximize `c'x` over the polytope `p`.
///
/// The returned point satisfies every row to within `tol.feas` (relative to
/// the row offset) and has reduced costs below `tol.opt`; the dual vector
/// certifies the objective value through strong duality. A polytope carrying
/// the explicit empty flag is reported infeasible without running phase 1.
pub fn solve_lp(c: &DVector<f64>, p: &Polytope, tol: &Tolerances) -> Result<LpOutcome, SolverError> {
    let d = p.dim();
    if c.len() != d {
        return Err(SolverError::Dimension(format!(
            "objective has {} entries but polytope lives in {} dimensions",
            c.len(),
            d
        )));
    }
    if p.is_marked_empty() {
        return Ok(LpOutcome::Infeasible { phase1_objective: f64::INFINITY });
    }
    let a = p.a();
    let b = p.b();
    let r = a.nrows();
    if r == 0 {
        // Full space: bounded only for a zero objective.
        return Ok(if c.amax() <= tol.pivot {
            LpOutcome::Optimal(LpSolution {
                x: DVector::zeros(d),
                value: 0.0,
                dual: DVector::zeros(0),
                active_rows: Vec::new(),
            })
        } else {
            LpOutcome::Unbounded { ray: c.clone() }
        });
    }

    // Standard form: columns are [xp (d) | xn (d) | slack (r) | artificial].
    // Rows with negative rhs are negated so the rhs is nonnegative; those rows
    // get a -1 slack and a +1 artificial, the rest start basic on their slack.
    let mut sign = vec![1.0_f64; r];
    let mut art_rows = Vec::new();
    for i in 0..r {
        if b[i] < 0.0 {
            sign[i] = -1.0;
            art_rows.push(i);
        }
    }
    let n_art = art_rows.len();
    let art_start = 2 * d + r;
    let ncols = art_start + n_art;

    let mut m = DMatrix::<f64>::zeros(r, ncols);
    let mut rhs = DVector::<f64>::zeros(r);
    for i in 0..r {
        for j in 0..d {
            let v = sign[i] * a[(i, j)];
            m[(i, j)] = v;
            m[(i, d + j)] = -v;
        }
        m[(i, 2 * d + i)] = sign[i];
        rhs[i] = sign[i] * b[i];
    }
    let mut basis = Vec::with_capacity(r);
    for (k, &i) in art_rows.iter().enumerate() {
        m[(i, art_start + k)] = 1.0;
    }
    {
        let mut next_art = 0;
        for i in 0..r {
            if sign[i] < 0.0 {
                basis.push(art_start + next_art);
                next_art += 1;
            } else {
                basis.push(2 * d + i);
            }
        }
    }

    let mut eng = Engine {
        m,
        rhs,
        basis,
        binv: DMatrix::identity(r, r),
        xb: DVector::zeros(r),
        in_basis: vec![false; ncols],
        art_start,
        tol: *tol,
        degenerate_streak: 0,
        bland: false,
        pivots_since_refactor: 0,
    };
    eng.xb.copy_from(&eng.rhs);
    for &bc in &eng.basis {
        eng.in_basis[bc] = true;
    }

    // Phase 1: drive the artificials to zero.
    if n_art > 0 {
        let mut cost1 = DVector::zeros(ncols);
        for j in art_start..ncols {
            cost1[j] = -1.0;
        }
        match eng.run(&cost1, true, "LP phase 1")? {
            Status::Optimal => {}
            Status::Unbounded { .. } => {
                return Err(SolverError::Numerical(
                    "phase 1 objective reported unbounded".into(),
                ));
            }
        }
        let infeas: f64 = (0..r)
            .filter(|&i| eng.basis[i] >= art_start)
            .map(|i| eng.xb[i].max(0.0))
            .sum();
        if infeas > tol.feas {
            return Ok(LpOutcome::Infeasible { phase1_objective: infeas });
        }
    }

    // Phase 2 on the true objective; artificials are barred from entering and
    // forced out by the ratio test if a step would ever regrow one.
    let mut cost2 = DVector::zeros(ncols);
    for j in 0..d {
        cost2[j] = c[j];
        cost2[d + j] = -c[j];
    }
    let status = eng.run(&cost2, false, "LP phase 2")?;

    match status {
        Status::Unbounded { entering, dir } => {
            let mut delta = DVector::zeros(ncols);
            delta[entering] = 1.0;
            for i in 0..r {
                delta[eng.basis[i]] -= dir[i];
            }
            let mut ray = DVector::zeros(d);
            for j in 0..d {
                ray[j] = delta[j] - delta[d + j];
            }
            Ok(LpOutcome::Unbounded { ray })
        }
        Status::Optimal => {
            let mut full = DVector::zeros(ncols);
            for i in 0..r {
                full[eng.basis[i]] = eng.xb[i];
            }
            let mut x = DVector::zeros(d);
            for j in 0..d {
                x[j] = full[j] - full[d + j];
            }
            let value = c.dot(&x);

            let cost_b = RowDVector::from_iterator(r, eng.basis.iter().map(|&bc| cost2[bc]));
            let y_std = &cost_b * &eng.binv;
            let mut dual = DVector::zeros(r);
            for i in 0..r {
                dual[i] = (sign[i] * y_std[i]).max(0.0);
            }

            let mut active_rows = Vec::new();
            let resid = b - a * &x;
            for i in 0..r {
                if resid[i] < -tol.feas * (1.0 + b[i].abs()) {
                    return Err(SolverError::Numerical(format!(
                        "returned point violates row {} by {:.3e}",
                        i, -resid[i]
                    )));
                }
                if resid[i] <= tol.feas.max(1e-8 * b[i].abs()) {
                    active_rows.push(i);
                }
            }
            let gap = (value - b.dot(&dual)).abs();
            if gap > 1e-6 * (1.0 + value.abs()) {
                return Err(SolverError::Numerical(format!(
                    "duality gap {:.3e} exceeds certification tolerance",
                    gap
                )));
            }
            Ok(LpOutcome::Optimal(LpSolution { x, value, dual, active_rows }))
        }
    }
}

enum Status {
    Optimal,
    Unbounded { entering: usize, dir: DVector<f64> },
}

struct Engine {
    m: DMatrix<f64>,
    rhs: DVector<f64>,
    basis: Vec<usize>,
    binv: DMatrix<f64>,
    xb: DVector<f64>,
    in_basis: Vec<bool>,
    art_start: usize,
    tol: Tolerances,
    degenerate_streak: usize,
    bland: bool,
    pivots_since_refactor: usize,
}

impl Engine {
    fn run(
        &mut self,
        cost: &DVector<f64>,
        allow_artificial: bool,
        phase: &'static str,
    ) -> Result<Status, SolverError> {
        let r = self.m.nrows();
        let ncols = self.m.ncols();
        let limit = 10_000 + 200 * (r + ncols);
        for _ in 0..limit {
            let cost_b = RowDVector::from_iterator(r, self.basis.iter().map(|&bc| cost[bc]));
            let y = &cost_b * &self.binv;

            let mut entering = None;
            let mut best_rc = self.tol.opt;
            for j in 0..ncols {
                if self.in_basis[j] || (!allow_artificial && j >= self.art_start) {
                    continue;
                }
                let mut yj = 0.0;
                for i in 0..r {
                    yj += y[i] * self.m[(i, j)];
                }
                let rc = cost[j] - yj;
                if self.bland {
                    if rc > self.tol.opt {
                        entering = Some(j);
                        break;
                    }
                } else if rc > best_rc {
                    best_rc = rc;
                    entering = Some(j);
                }
            }
            let q = match entering {
                Some(q) => q,
                None => return Ok(Status::Optimal),
            };

            let dir = &self.binv * self.m.column(q);

            // Ratio test. Rows whose basic variable is an artificial sitting
            // at zero are blocking for any nonzero direction entry, which
            // keeps phase 2 from regrowing an artificial left basic at zero.
            let mut theta = f64::INFINITY;
            let mut leave: Option<usize> = None;
            for i in 0..r {
                let di = dir[i];
                let is_art = self.basis[i] >= self.art_start;
                let candidate_theta = if di > self.tol.pivot {
                    Some(self.xb[i].max(0.0) / di)
                } else if is_art && di < -self.tol.pivot && self.xb[i] <= self.tol.feas {
                    Some(0.0)
                } else {
                    None
                };
                let th = match candidate_theta {
                    Some(th) => th,
                    None => continue,
                };
                let better = match leave {
                    None => true,
                    Some(l) => {
                        if th < theta - 1e-12 {
                            true
                        } else if th > theta + 1e-12 {
                            false
                        } else {
                            // Tie: prefer evicting artificials, then the
                            // lowest basis column index (Bland-compatible).
                            let cur_art = self.basis[l] >= self.art_start;
                            match (is_art, cur_art) {
                                (true, false) => true,
                                (false, true) => false,
                                _ => self.basis[i] < self.basis[l],
                            }
                        }
                    }
                };
                if better {
                    theta = th;
                    leave = Some(i);
                }
            }
            let l = match leave {
                None => return Ok(Status::Unbounded { entering: q, dir }),
                Some(l) => l,
            };

            if theta <= self.tol.pivot {
                self.degenerate_streak += 1;
                if self.degenerate_streak > 10 * r {
                    self.bland = true;
                }
            } else {
                self.degenerate_streak = 0;
            }

            self.pivot(q, l, theta, &dir)?;
            if self.pivots_since_refactor >= 128 {
                self.refactor()?;
            }
        }
        Err(SolverError::IterationLimit { phase, limit })
    }

    fn pivot(&mut self, q: usize, l: usize, theta: f64, dir: &DVector<f64>) -> Result<(), SolverError> {
        let piv = dir[l];
        if piv.abs() <= self.tol.pivot {
            return Err(SolverError::Numerical("pivot element below threshold".into()));
        }
        let r = self.m.nrows();
        let row_l = self.binv.row(l) / piv;
        for i in 0..r {
            if i == l {
                continue;
            }
            let f = dir[i];
            if f != 0.0 {
                let mut row_i = self.binv.row_mut(i);
                row_i -= &row_l * f;
                self.xb[i] -= theta * f;
            }
        }
        self.binv.row_mut(l).copy_from(&row_l);
        self.xb[l] = theta;

        self.in_basis[self.basis[l]] = false;
        self.in_basis[q] = true;
        self.basis[l] = q;
        self.pivots_since_refactor += 1;
        Ok(())
    }

    fn refactor(&mut self) -> Result<(), SolverError> {
        let r = self.m.nrows();
        let mut bmat = DMatrix::<f64>::zeros(r, r);
        for (k, &bc) in self.basis.iter().enumerate() {
            bmat.set_column(k, &self.m.column(bc));
        }
        self.binv = bmat
            .lu()
            .try_inverse()
            .ok_or_else(|| SolverError::Numerical("basis matrix became singular".into()))?;
        self.xb = &self.binv * &self.rhs;
        self.pivots_since_refactor = 0;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn poly(rows: Vec<Vec<f64>>, b: Vec<f64>) -> Polytope {
        let r = rows.len();
        let d = rows[0].len();
        let a = DMatrix::from_row_iterator(r, d, rows.into_iter().flatten());
        Polytope::new(a, DVector::from_vec(b)).unwrap()
    }

    #[test]
    fn maximizes_over_a_box() {
        let p = poly(
            vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]],
            vec![2.0, 1.0, 3.0, 1.5],
        );
        let c = DVector::from_vec(vec![1.0, -2.0]);
        match solve_lp(&c, &p, &Tolerances::standard()).unwrap() {
            LpOutcome::Optimal(s) => {
                assert_abs_diff_eq!(s.x[0], 2.0, epsilon = 1e-9);
                assert_abs_diff_eq!(s.x[1], -1.5, epsilon = 1e-9);
                assert_abs_diff_eq!(s.value, 5.0, epsilon = 1e-9);
                assert_eq!(s.active_rows, vec![0, 3]);
            }
            other => panic!("expected optimum, got {other:?}"),
        }
    }

    #[test]
    fn negative_rhs_requires_phase_one() {
        // x >= 1 (written -x <= -1), x <= 3: maximize -x hits the lower bound.
        let p = poly(vec![vec![-1.0], vec![1.0]], vec![-1.0, 3.0]);
        let c = DVector::from_vec(vec![-1.0]);
        match solve_lp(&c, &p, &Tolerances::standard()).unwrap() {
            LpOutcome::Optimal(s) => {
                assert_abs_diff_eq!(s.x[0], 1.0, epsilon = 1e-9);
                assert_abs_diff_eq!(s.value, -1.0, epsilon = 1e-9);
                // Duality: value = b'y = -1*y0 + 3*y1 with y1 = 0.
                assert_abs_diff_eq!(s.dual[0], 1.0, epsilon = 1e-7);
                assert_abs_diff_eq!(s.dual[1], 0.0, epsilon = 1e-7);
            }
            other => panic!("expected optimum, got {other:?}"),
        }
    }

    #[test]
    fn reports_infeasible_with_positive_certificate() {
        let p = poly(vec![vec![1.0], vec![-1.0]], vec![1.0, -2.0]);
        let c = DVector::from_vec(vec![1.0]);
        match solve_lp(&c, &p, &Tolerances::standard()).unwrap() {
            LpOutcome::Infeasible { phase1_objective } => assert!(phase1_objective > 0.5),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn reports_unbounded_with_improving_ray() {
        let p = poly(vec![vec![-1.0, 0.0], vec![0.0, -1.0]], vec![0.0, 0.0]);
        let c = DVector::from_vec(vec![1.0, 1.0]);
        match solve_lp(&c, &p, &Tolerances::standard()).unwrap() {
            LpOutcome::Unbounded { ray } => {
                assert!(c.dot(&ray) > 1e-9);
                let prod = p.a() * &ray;
                assert!(prod.iter().all(|&v| v <= 1e-9));
            }
            other => panic!("expected unbounded, got {other:?}"),
        }
    }

    #[test]
    fn marked_empty_set_is_infeasible_without_work() {
        let p = Polytope::empty(3);
        let c = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        match solve_lp(&c, &p, &Tolerances::standard()).unwrap() {
            LpOutcome::Infeasible { .. } => {}
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn identical_inputs_give_bitwise_identical_solutions() {
        let p = poly(
            vec![
                vec![0.3, 1.0],
                vec![1.0, 0.2],
                vec![-1.0, 0.4],
                vec![0.1, -1.0],
                vec![-0.7, -0.9],
            ],
            vec![1.1, 0.9, 1.3, 0.7, 1.0],
        );
        let c = DVector::from_vec(vec![0.37, -1.21]);
        let s1 = match solve_lp(&c, &p, &Tolerances::standard()).unwrap() {
            LpOutcome::Optimal(s) => s,
            other => panic!("expected optimum, got {other:?}"),
        };
        let s2 = match solve_lp(&c, &p, &Tolerances::standard()).unwrap() {
            LpOutcome::Optimal(s) => s,
            other => panic!("expected optimum, got {other:?}"),
        };
        assert_eq!(s1.x.as_slice(), s2.x.as_slice());
        assert!(s1.value.to_bits() == s2.value.to_bits());
        assert_eq!(s1.dual.as_slice(), s2.dual.as_slice());
    }
}
