//! Shared fixtures and independent oracles for the integration suite.
//!
//! The oracles deliberately take different algorithmic routes than the
//! library: a tableau simplex instead of the revised method, exhaustive
//! KKT-system enumeration instead of active-set pivoting, and closed-form
//! normal quantiles instead of sampling.

#![allow(dead_code)]

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use smpc::cli::config::{BuiltConfig, ScenarioConfig};
use smpc::model::derive_rng;
use smpc::mpc::{synthesize, SynthesisBundle, TighteningMode};
use smpc::poly::Polytope;
use smpc::solver::{solve_lp, solve_qp, LpOutcome, QpOutcome, QpProblem, Tolerances};
use smpc::DisturbanceModel;

pub fn config_path(name: &str) -> String {
    format!("{}/../../configs/{name}", env!("CARGO_MANIFEST_DIR"))
}

pub fn load_built(name: &str) -> BuiltConfig {
    ScenarioConfig::load(&config_path(name))
        .expect("config parses")
        .build()
        .expect("config builds")
}

/// Single-constraint benchmark (the step-response experiment), synthesized in
/// the sampled mode. Shared per test binary.
pub fn iv_a() -> &'static (SynthesisBundle, DisturbanceModel) {
    static CELL: OnceLock<(SynthesisBundle, DisturbanceModel)> = OnceLock::new();
    CELL.get_or_init(|| {
        let built = load_built("dcdc_iv_a.json");
        let bundle = synthesize(
            &built.sys,
            &built.dist,
            &built.cons,
            &built.q_weight,
            &built.r_weight,
            &built.opts,
        )
        .expect("benchmark synthesis succeeds");
        (bundle, built.dist)
    })
}

/// Box-constrained benchmark (the region-comparison experiment) in the
/// requested tightening mode.
pub fn iv_b(mode: TighteningMode) -> &'static SynthesisBundle {
    static PROPOSED: OnceLock<SynthesisBundle> = OnceLock::new();
    static RF_TUBE: OnceLock<SynthesisBundle> = OnceLock::new();
    static ROBUST: OnceLock<SynthesisBundle> = OnceLock::new();
    let cell = match mode {
        TighteningMode::Proposed => &PROPOSED,
        TighteningMode::RfTube => &RF_TUBE,
        TighteningMode::Robust => &ROBUST,
    };
    cell.get_or_init(|| {
        let mut built = load_built("dcdc_iv_b.json");
        built.opts.mode = mode;
        synthesize(
            &built.sys,
            &built.dist,
            &built.cons,
            &built.q_weight,
            &built.r_weight,
            &built.opts,
        )
        .expect("benchmark synthesis succeeds")
    })
}

pub fn standard_normal_quantile(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)
}

/// Probability band `(p_lo, p_hi)` such that the rank-`ceil(level n)` order
/// statistic of `n` i.i.d. draws lies between the true `p_lo`- and
/// `p_hi`-quantiles with confidence `~Phi(z)` two-sided (CLT on the rank).
pub fn order_stat_band(n: usize, level: f64, z: f64) -> (f64, f64) {
    let nf = n as f64;
    let k = (level * nf).ceil();
    let half = z * (nf * level * (1.0 - level)).sqrt();
    let lo = ((k - half) / nf).clamp(1e-12, 1.0 - 1e-12);
    let hi = ((k + half) / nf).clamp(1e-12, 1.0 - 1e-12);
    (lo, hi)
}

// ---------------------------------------------------------------------------
// Tableau-simplex LP oracle
// ---------------------------------------------------------------------------

/// Maximize `c'x` subject to `a x <= b`, `x >= 0`, with `b >= 0` so the
/// origin is a starting basis. Dense tableau simplex with a Bland fallback.
/// Returns `None` when unbounded.
pub fn simplex_oracle(c: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> Option<f64> {
    let (r, d) = (a.nrows(), a.ncols());
    assert!(b.iter().all(|&v| v >= 0.0), "oracle needs b >= 0");
    // Columns: d structural, r slacks, 1 rhs.
    let cols = d + r + 1;
    let mut t = DMatrix::<f64>::zeros(r + 1, cols);
    for i in 0..r {
        for j in 0..d {
            t[(i, j)] = a[(i, j)];
        }
        t[(i, d + i)] = 1.0;
        t[(i, cols - 1)] = b[i];
    }
    for j in 0..d {
        t[(r, j)] = -c[j];
    }
    let mut basis: Vec<usize> = (d..d + r).collect();

    let max_iters = 200 * (r + d).max(1);
    for iter in 0..max_iters {
        let bland = iter > 20 * (r + d);
        // Entering column: most negative reduced cost (or first, under Bland).
        let mut enter = None;
        let mut best = -1e-9;
        for j in 0..cols - 1 {
            let rc = t[(r, j)];
            if rc < best {
                enter = Some(j);
                if bland {
                    break;
                }
                best = rc;
            }
        }
        let Some(j) = enter else {
            return Some(t[(r, cols - 1)]);
        };
        // Ratio test.
        let mut leave = None;
        let mut best_ratio = f64::INFINITY;
        for i in 0..r {
            if t[(i, j)] > 1e-9 {
                let ratio = t[(i, cols - 1)] / t[(i, j)];
                if ratio < best_ratio - 1e-12
                    || (ratio < best_ratio + 1e-12
                        && leave.is_some_and(|l: usize| basis[i] < basis[l]))
                {
                    best_ratio = ratio;
                    leave = Some(i);
                }
            }
        }
        let Some(i) = leave else {
            return None; // unbounded
        };
        // Pivot on (i, j).
        let piv = t[(i, j)];
        for col in 0..cols {
            t[(i, col)] /= piv;
        }
        for row in 0..=r {
            if row != i {
                let f = t[(row, j)];
                if f != 0.0 {
                    for col in 0..cols {
                        t[(row, col)] -= f * t[(i, col)];
                    }
                }
            }
        }
        basis[i] = j;
    }
    panic!("tableau simplex did not terminate");
}

// ---------------------------------------------------------------------------
// Exhaustive KKT-enumeration QP oracle
// ---------------------------------------------------------------------------

/// Minimize `x' h x + c'x` subject to `a x <= b` (gradient `2 h x + c`) by
/// trying every active subset of size at most `d` and keeping the best
/// feasible KKT point. `None` when no subset yields one (infeasible).
pub fn kkt_oracle(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Option<(DVector<f64>, f64)> {
    let d = h.nrows();
    let r = a.nrows();
    assert!(r < 26, "oracle enumerates subsets; keep rows small");
    let mut best: Option<(DVector<f64>, f64)> = None;
    for mask in 0u32..(1 << r) {
        let k = mask.count_ones() as usize;
        if k > d {
            continue;
        }
        let rows: Vec<usize> = (0..r).filter(|i| mask >> i & 1 == 1).collect();
        // KKT system: [2h  a_S'; a_S  0] [x; lam] = [-c; b_S].
        let dim = d + k;
        let mut kkt = DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = DVector::<f64>::zeros(dim);
        for i in 0..d {
            for j in 0..d {
                kkt[(i, j)] = 2.0 * h[(i, j)];
            }
            rhs[i] = -c[i];
        }
        for (s, &row) in rows.iter().enumerate() {
            for j in 0..d {
                kkt[(j, d + s)] = a[(row, j)];
                kkt[(d + s, j)] = a[(row, j)];
            }
            rhs[d + s] = b[row];
        }
        let lu = kkt.clone().full_piv_lu();
        let Some(sol) = lu.solve(&rhs) else {
            continue;
        };
        if (kkt * &sol - &rhs).amax() > 1e-7 {
            continue; // singular active set
        }
        let x = sol.rows(0, d).into_owned();
        let lam = sol.rows(d, k);
        if lam.iter().any(|&l| l < -1e-8) {
            continue;
        }
        let slack = a * &x - b;
        if slack.iter().any(|&s| s > 1e-8) {
            continue;
        }
        let value = (&x.transpose() * h * &x)[0] + c.dot(&x);
        match &best {
            Some((_, v)) if *v <= value => {}
            _ => best = Some((x, value)),
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Random-instance suites (shared between the oracle tests and the
// acceptance gate)
// ---------------------------------------------------------------------------

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Random bounded LPs checked against the tableau oracle and strong duality.
/// Returns the number of instances verified.
pub fn run_lp_oracle_suite(instances: usize, seed: u64) -> usize {
    let tol = Tolerances::standard();
    let mut rng = derive_rng(seed, 0x4c50);
    for inst in 0..instances {
        let d = 2 + inst % 4; // 2..=5
        let extra = 1 + inst % 6;
        let ub: Vec<f64> = (0..d).map(|_| 1.0 + 2.0 * rng.random::<f64>()).collect();
        let mut a = DMatrix::<f64>::zeros(extra, d);
        let mut b = DVector::<f64>::zeros(extra);
        for i in 0..extra {
            for j in 0..d {
                a[(i, j)] = normal(&mut rng);
            }
            b[i] = 0.5 + 2.0 * rng.random::<f64>();
        }
        let c = DVector::from_fn(d, |_, _| normal(&mut rng));

        // Library-side polytope: the random rows plus 0 <= x <= ub.
        let rows = extra + 2 * d;
        let mut pa = DMatrix::<f64>::zeros(rows, d);
        let mut pb = DVector::<f64>::zeros(rows);
        pa.rows_mut(0, extra).copy_from(&a);
        pb.rows_mut(0, extra).copy_from(&b);
        for j in 0..d {
            pa[(extra + j, j)] = 1.0;
            pb[extra + j] = ub[j];
            pa[(extra + d + j, j)] = -1.0;
        }
        let poly = Polytope::new(pa, pb).unwrap();
        let got = match solve_lp(&c, &poly, &tol).unwrap() {
            LpOutcome::Optimal(s) => s,
            other => panic!("instance {inst}: expected optimal, got {other:?}"),
        };

        // Oracle side: slack form needs the box rows appended explicitly.
        let mut oa = DMatrix::<f64>::zeros(extra + d, d);
        let mut ob = DVector::<f64>::zeros(extra + d);
        oa.rows_mut(0, extra).copy_from(&a);
        ob.rows_mut(0, extra).copy_from(&b);
        for j in 0..d {
            oa[(extra + j, j)] = 1.0;
            ob[extra + j] = ub[j];
        }
        let want = simplex_oracle(&c, &oa, &ob).expect("box keeps the LP bounded");
        assert!(
            (got.value - want).abs() <= 1e-7 * (1.0 + want.abs()),
            "instance {inst}: value {} vs oracle {want}",
            got.value
        );
        // Strong duality on the library's certificate.
        let dual_value = got.dual.dot(poly.b());
        assert!(
            (got.value - dual_value).abs() <= 1e-7 * (1.0 + got.value.abs()),
            "instance {inst}: duality gap {} vs {}",
            got.value,
            dual_value
        );
    }
    instances
}

/// Random strictly convex QPs checked against exhaustive KKT enumeration.
/// Returns the number of instances verified.
pub fn run_qp_oracle_suite(instances: usize, seed: u64) -> usize {
    let tol = Tolerances::standard();
    let mut rng = derive_rng(seed, 0x5150);
    for inst in 0..instances {
        let d = 1 + inst % 8; // 1..=8
        let extra = 2 + inst % 3;
        let m = DMatrix::from_fn(d, d, |_, _| normal(&mut rng));
        let h = &m * m.transpose() + DMatrix::identity(d, d) * (0.3 + rng.random::<f64>());
        let lin = DVector::from_fn(d, |_, _| 2.0 * normal(&mut rng));

        let rows = extra + 2 * d;
        let mut a = DMatrix::<f64>::zeros(rows, d);
        let mut b = DVector::<f64>::zeros(rows);
        for i in 0..extra {
            for j in 0..d {
                a[(i, j)] = normal(&mut rng);
            }
            b[i] = 0.2 + rng.random::<f64>();
        }
        for j in 0..d {
            a[(extra + j, j)] = 1.0;
            b[extra + j] = 2.0;
            a[(extra + d + j, j)] = -1.0;
            b[extra + d + j] = 2.0;
        }

        let problem = QpProblem {
            hess: h.clone(),
            lin: lin.clone(),
            constant: 0.0,
            constraints: Polytope::new(a.clone(), b.clone()).unwrap(),
        };
        let got = match solve_qp(&problem, None, &tol).unwrap() {
            QpOutcome::Optimal(s) => s,
            QpOutcome::Infeasible { .. } => {
                panic!("instance {inst}: origin-feasible QP reported infeasible")
            }
        };
        let (ox, ov) = kkt_oracle(&h, &lin, &a, &b).expect("origin is feasible");
        assert!(
            (got.value - ov).abs() <= 1e-6 * (1.0 + ov.abs()),
            "instance {inst}: value {} vs oracle {ov}",
            got.value
        );
        assert!(
            (&got.x - &ox).amax() <= 1e-5,
            "instance {inst}: minimizer drift {:e}",
            (&got.x - &ox).amax()
        );
    }
    instances
}

/// Random 2-D-from-4-D projections checked point-by-point against the
/// LP-lift membership test. Returns `(instances, points per instance)`.
pub fn run_projection_lift_suite(instances: usize, points: usize, seed: u64) -> (usize, usize) {
    let tol = Tolerances::standard();
    let mut rng = derive_rng(seed, 0x504c);
    for inst in 0..instances {
        let lifted_dim = 4;
        let extra = 4 + inst % 4;
        let rows = extra + 2 * lifted_dim;
        let mut a = DMatrix::<f64>::zeros(rows, lifted_dim);
        let mut b = DVector::<f64>::zeros(rows);
        for i in 0..extra {
            for j in 0..lifted_dim {
                a[(i, j)] = normal(&mut rng);
            }
            b[i] = 0.5 + rng.random::<f64>();
        }
        for j in 0..lifted_dim {
            a[(extra + j, j)] = 1.0;
            b[extra + j] = 3.0;
            a[(extra + lifted_dim + j, j)] = -1.0;
            b[extra + lifted_dim + j] = 3.0;
        }
        let lifted = Polytope::new(a.clone(), b.clone()).unwrap();
        let shadow = lifted.project(&[0, 1]).unwrap();

        for pt in 0..points {
            let x = DVector::from_fn(2, |_, _| 2.5 * normal(&mut rng));
            // Lift test: exists y with (x, y) in the lifted set. Fix the x
            // coordinates and feed the y-polytope to the LP as a pure
            // feasibility problem.
            let mut ya = DMatrix::<f64>::zeros(rows, lifted_dim - 2);
            let mut yb = DVector::<f64>::zeros(rows);
            for i in 0..rows {
                for j in 2..lifted_dim {
                    ya[(i, j - 2)] = a[(i, j)];
                }
                yb[i] = b[i] - a[(i, 0)] * x[0] - a[(i, 1)] * x[1];
            }
            let ypoly = Polytope::new(ya, yb).unwrap();
            let liftable = matches!(
                solve_lp(&DVector::zeros(lifted_dim - 2), &ypoly, &tol).unwrap(),
                LpOutcome::Optimal(_)
            );
            // Skip knife-edge points where the two answers may legitimately
            // differ by tolerance.
            let margin = (0..shadow.num_rows())
                .map(|i| (shadow.a().row(i).transpose().dot(&x) - shadow.b()[i]).abs())
                .fold(f64::INFINITY, f64::min);
            if margin < 1e-7 {
                continue;
            }
            let member = shadow.contains(&x, 1e-9);
            assert_eq!(
                member, liftable,
                "instance {inst} point {pt}: projection membership {member} vs lift {liftable}"
            );
        }
    }
    (instances, points)
}

/// Erosion-by-box instances: the difference's vertices, fattened back by the
/// box's vertices, must land inside the original set, and the membership
/// predicate must match the vertex test point-by-point.
pub fn run_erosion_vertex_suite(instances: usize, points: usize, seed: u64) -> (usize, usize) {
    let mut rng = derive_rng(seed, 0x504f);
    for inst in 0..instances {
        let extra = 3 + inst % 4;
        let rows = extra + 4;
        let mut a = DMatrix::<f64>::zeros(rows, 2);
        let mut b = DVector::<f64>::zeros(rows);
        for i in 0..extra {
            let th = rng.random::<f64>() * std::f64::consts::TAU;
            a[(i, 0)] = th.cos();
            a[(i, 1)] = th.sin();
            b[i] = 0.8 + rng.random::<f64>();
        }
        a[(extra, 0)] = 1.0;
        a[(extra + 1, 0)] = -1.0;
        a[(extra + 2, 1)] = 1.0;
        a[(extra + 3, 1)] = -1.0;
        for i in 0..4 {
            b[extra + i] = 2.0;
        }
        let p = Polytope::new(a, b).unwrap().reduce().unwrap();
        let hw = 0.05 + 0.3 * rng.random::<f64>();
        let wbox = Polytope::from_box(&[-hw, -hw], &[hw, hw]).unwrap();
        let eroded = p.pontryagin_diff(&wbox, &DMatrix::identity(2, 2)).unwrap();

        let wverts = [[-hw, -hw], [-hw, hw], [hw, -hw], [hw, hw]];
        for v in eroded.vertices_2d().unwrap() {
            for w in &wverts {
                let shifted = DVector::from_row_slice(&[v.x + w[0], v.y + w[1]]);
                assert!(
                    p.contains(&shifted, 1e-9),
                    "instance {inst}: eroded vertex + corner escapes the set"
                );
            }
        }
        for _ in 0..points {
            let x = DVector::from_fn(2, |_, _| 2.2 * normal(&mut rng));
            let margin = (0..eroded.num_rows())
                .map(|i| (eroded.a().row(i).transpose().dot(&x) - eroded.b()[i]).abs())
                .fold(f64::INFINITY, f64::min);
            if margin < 1e-7 {
                continue;
            }
            let direct = eroded.contains(&x, 1e-9);
            let vertex_test = wverts.iter().all(|w| {
                p.contains(&DVector::from_row_slice(&[x[0] + w[0], x[1] + w[1]]), 1e-9)
            });
            assert_eq!(direct, vertex_test, "instance {inst}: erosion membership mismatch");
        }
    }
    (instances, points)
}
