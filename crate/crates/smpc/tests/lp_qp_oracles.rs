//! The dense LP and QP solvers against independently coded oracles: a
//! tableau simplex and exhaustive KKT-subset enumeration.

mod common;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use smpc::model::derive_rng;
use smpc::poly::Polytope;
use smpc::solver::{solve_lp, solve_qp, LpOutcome, QpOutcome, QpProblem, Tolerances};

#[test]
fn random_lps_match_the_tableau_simplex_oracle() {
    let n = common::run_lp_oracle_suite(500, 41);
    assert_eq!(n, 500);
}

#[test]
fn random_qps_match_the_exhaustive_kkt_oracle() {
    let n = common::run_qp_oracle_suite(500, 42);
    assert_eq!(n, 500);
}

#[test]
fn qp_optimum_admits_no_improving_feasible_direction() {
    let tol = Tolerances::standard();
    let mut rng = derive_rng(7, 0xd1f);
    for inst in 0..20 {
        let d = 2 + inst % 4;
        let m = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let hess = &m * m.transpose() + DMatrix::identity(d, d) * 0.5;
        let lin = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let mut a = DMatrix::<f64>::zeros(2 * d + 3, d);
        let mut b = DVector::<f64>::zeros(2 * d + 3);
        for j in 0..d {
            a[(j, j)] = 1.0;
            b[j] = 1.0;
            a[(d + j, j)] = -1.0;
            b[d + j] = 1.0;
        }
        for i in 0..3 {
            for j in 0..d {
                a[(2 * d + i, j)] = rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
            b[2 * d + i] = 0.3 + rng.random::<f64>();
        }
        let problem = QpProblem {
            hess: hess.clone(),
            lin: lin.clone(),
            constant: 0.0,
            constraints: Polytope::new(a.clone(), b.clone()).unwrap(),
        };
        let sol = match solve_qp(&problem, None, &tol).unwrap() {
            QpOutcome::Optimal(s) => s,
            QpOutcome::Infeasible { .. } => panic!("origin-feasible QP reported infeasible"),
        };
        let value = |x: &DVector<f64>| (&x.transpose() * &hess * x)[0] + lin.dot(x);
        let v0 = value(&sol.x);
        let mut tried = 0;
        while tried < 100 {
            let dir = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal))
                .normalize();
            let cand = &sol.x + 1e-4 * &dir;
            if (&a * &cand - &b).iter().any(|&s| s > 1e-12) {
                continue; // direction leaves the feasible set
            }
            tried += 1;
            assert!(
                value(&cand) >= v0 - 1e-9,
                "instance {inst}: objective drops along a feasible direction"
            );
        }
    }
}

#[test]
fn repeated_solves_are_bitwise_identical() {
    let tol = Tolerances::standard();
    let mut rng = derive_rng(19, 0xb17);
    let d = 5;
    let m = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let hess = &m * m.transpose() + DMatrix::identity(d, d);
    let lin = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let mut a = DMatrix::<f64>::zeros(2 * d, d);
    let mut b = DVector::<f64>::zeros(2 * d);
    for j in 0..d {
        a[(j, j)] = 1.0;
        b[j] = 0.8;
        a[(d + j, j)] = -1.0;
        b[d + j] = 0.8;
    }
    let poly = Polytope::new(a, b).unwrap();
    let problem =
        QpProblem { hess, lin: lin.clone(), constant: 0.0, constraints: poly.clone() };

    let first = match solve_qp(&problem, None, &tol).unwrap() {
        QpOutcome::Optimal(s) => s,
        _ => panic!("feasible"),
    };
    for _ in 0..3 {
        let again = match solve_qp(&problem, None, &tol).unwrap() {
            QpOutcome::Optimal(s) => s,
            _ => panic!("feasible"),
        };
        assert_eq!(first.value.to_bits(), again.value.to_bits());
        for i in 0..d {
            assert_eq!(first.x[i].to_bits(), again.x[i].to_bits());
        }
    }

    let c = DVector::from_fn(d, |i, _| if i % 2 == 0 { 1.0 } else { -0.5 });
    let lp_first = match solve_lp(&c, &poly, &tol).unwrap() {
        LpOutcome::Optimal(s) => s,
        _ => panic!("feasible"),
    };
    for _ in 0..3 {
        let again = match solve_lp(&c, &poly, &tol).unwrap() {
            LpOutcome::Optimal(s) => s,
            _ => panic!("feasible"),
        };
        assert_eq!(lp_first.value.to_bits(), again.value.to_bits());
    }
}
