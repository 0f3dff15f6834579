//! Polytope calculus: property-based checks plus hand-constructed
//! geometric oracles.

mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use smpc::poly::Polytope;

#[test]
fn projection_agrees_with_lp_lift_membership() {
    let (instances, points) = common::run_projection_lift_suite(50, 20, 23);
    assert_eq!((instances, points), (50, 20));
}

#[test]
fn erosion_vertices_absorb_every_disturbance_corner() {
    let (instances, points) = common::run_erosion_vertex_suite(40, 25, 29);
    assert_eq!((instances, points), (40, 25));
}

#[test]
fn tangent_polygon_of_the_disc_reduces_to_itself() {
    // 50 halfspaces tangent to the unit disc: none is redundant, and the
    // enclosed area is the circumscribed-polygon value n tan(pi / n).
    let n = 50;
    let mut a = DMatrix::<f64>::zeros(n, 2);
    let mut b = DVector::<f64>::zeros(n);
    for i in 0..n {
        let th = std::f64::consts::TAU * i as f64 / n as f64;
        a[(i, 0)] = th.cos();
        a[(i, 1)] = th.sin();
        b[i] = 1.0;
    }
    let poly = Polytope::new(a.clone(), b.clone()).unwrap();
    let reduced = poly.reduce().unwrap();
    assert_eq!(reduced.num_rows(), n, "tangent rows are all irredundant");
    let expect = n as f64 * (std::f64::consts::PI / n as f64).tan();
    assert!((reduced.area_2d().unwrap() - expect).abs() < 1e-9);

    // Doubling every row (scaled by 2) and adding a loose box leaves exactly
    // the tangent rows after reduction.
    let mut a2 = DMatrix::<f64>::zeros(2 * n + 4, 2);
    let mut b2 = DVector::<f64>::zeros(2 * n + 4);
    a2.rows_mut(0, n).copy_from(&a);
    b2.rows_mut(0, n).copy_from(&b);
    a2.rows_mut(n, n).copy_from(&(&a * 2.0));
    b2.rows_mut(n, n).copy_from(&(&b * 2.0));
    a2[(2 * n, 0)] = 1.0;
    a2[(2 * n + 1, 0)] = -1.0;
    a2[(2 * n + 2, 1)] = 1.0;
    a2[(2 * n + 3, 1)] = -1.0;
    for i in 0..4 {
        b2[2 * n + i] = 5.0;
    }
    let fat = Polytope::new(a2, b2).unwrap().reduce().unwrap();
    assert_eq!(fat.num_rows(), n, "duplicates and loose rows are dropped");
    assert!(fat.set_equal(&reduced, 1e-9).unwrap());
}

#[test]
fn area_is_invariant_under_rotation() {
    let poly = Polytope::new(
        DMatrix::from_row_slice(5, 2, &[1.0, 0.2, -0.3, 1.0, -1.0, -0.4, 0.6, -1.0, 1.0, 1.0]),
        DVector::from_row_slice(&[1.0, 1.5, 1.2, 0.8, 1.6]),
    )
    .unwrap();
    let th = 0.83_f64;
    let rot = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
    // affine_preimage(R) = {x : R x in P} = R' P, a pure rotation of P.
    let turned = poly.affine_preimage(&rot).unwrap();
    assert!((poly.area_2d().unwrap() - turned.area_2d().unwrap()).abs() < 1e-9);
}

fn arb_polytope() -> impl Strategy<Value = Polytope> {
    // 3..=8 random halfspaces with positive offsets (origin stays feasible),
    // intersected with a fixed box so every instance is bounded.
    let row = (0.0f64..std::f64::consts::TAU, 0.3f64..2.0);
    proptest::collection::vec(row, 3..8).prop_map(|rows| {
        let extra = rows.len();
        let mut a = DMatrix::<f64>::zeros(extra + 4, 2);
        let mut b = DVector::<f64>::zeros(extra + 4);
        for (i, (th, off)) in rows.into_iter().enumerate() {
            a[(i, 0)] = th.cos();
            a[(i, 1)] = th.sin();
            b[i] = off;
        }
        a[(extra, 0)] = 1.0;
        a[(extra + 1, 0)] = -1.0;
        a[(extra + 2, 1)] = 1.0;
        a[(extra + 3, 1)] = -1.0;
        for i in 0..4 {
            b[extra + i] = 2.5;
        }
        Polytope::new(a, b).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reduce_is_idempotent_and_preserves_the_set(poly in arb_polytope()) {
        let once = poly.reduce().unwrap();
        let twice = once.reduce().unwrap();
        prop_assert!(once.set_equal(&poly, 1e-9).unwrap());
        prop_assert_eq!(once.num_rows(), twice.num_rows());
        prop_assert!(twice.set_equal(&once, 1e-12).unwrap());
    }

    #[test]
    fn supports_add_over_a_minkowski_sum(poly in arb_polytope(), hw in 0.05f64..0.8) {
        let wbox = Polytope::from_box(&[-hw, -hw * 0.5], &[hw, hw * 0.5]).unwrap();
        let sum = poly.minkowski_sum(&wbox).unwrap();
        for i in 0..12 {
            let th = std::f64::consts::TAU * i as f64 / 12.0;
            let dir = DVector::from_row_slice(&[th.cos(), th.sin()]);
            let want = poly.support(&dir).unwrap() + wbox.support(&dir).unwrap();
            prop_assert!((sum.support(&dir).unwrap() - want).abs() < 1e-8);
        }
    }

    #[test]
    fn erosion_then_fattening_stays_inside(poly in arb_polytope(), hw in 0.05f64..0.4) {
        let wbox = Polytope::from_box(&[-hw, -hw], &[hw, hw]).unwrap();
        let eroded = poly.pontryagin_diff(&wbox, &DMatrix::identity(2, 2)).unwrap();
        let back = eroded.minkowski_sum(&wbox).unwrap();
        prop_assert!(back.is_subset(&poly, 1e-9).unwrap());
    }

    #[test]
    fn projection_of_a_product_recovers_the_factor(poly in arb_polytope()) {
        // Lift P x [-1, 1] to 3-D and project back onto the first two
        // coordinates: exactly P again.
        let rows = poly.num_rows();
        let mut a = DMatrix::<f64>::zeros(rows + 2, 3);
        let mut b = DVector::<f64>::zeros(rows + 2);
        for i in 0..rows {
            a[(i, 0)] = poly.a()[(i, 0)];
            a[(i, 1)] = poly.a()[(i, 1)];
            b[i] = poly.b()[i];
        }
        a[(rows, 2)] = 1.0;
        b[rows] = 1.0;
        a[(rows + 1, 2)] = -1.0;
        b[rows + 1] = 1.0;
        let lifted = Polytope::new(a, b).unwrap();
        let shadow = lifted.project(&[0, 1]).unwrap();
        prop_assert!(shadow.set_equal(&poly, 1e-9).unwrap());
    }
}
