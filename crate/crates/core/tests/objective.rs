use pis_core::objective::{aggregate_objective, Aggregation, DesignObjective, OvershootPenalty};
use pis_core::simulate::Trajectory;
use pis_core::DVector;
use proptest::prelude::*;

fn traj(rows: &[[f64; 2]], dt: f64) -> Trajectory {
    Trajectory {
        dt,
        states: rows.iter().map(|r| DVector::from_row_slice(r)).collect(),
        inputs: vec![DVector::zeros(1); rows.len().saturating_sub(1)],
    }
}

fn rows() -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0).prop_map(|(a, b)| [a, b]), 2..30)
}

proptest! {
    #[test]
    fn monotone_in_penalized_component(r in rows(), k in 0usize..30, bump in 0.0f64..2.0) {
        let pen = OvershootPenalty::new(1, 0.5, 10.0).unwrap();
        let k = k % r.len();
        let mut raised = r.clone();
        raised[k][1] += bump;
        prop_assert!(pen.evaluate(&traj(&raised, 0.01)) >= pen.evaluate(&traj(&r, 0.01)));
    }

    #[test]
    fn blind_to_other_components(r in rows(), shift in -3.0f64..3.0) {
        let pen = OvershootPenalty::new(1, 0.5, 10.0).unwrap();
        let moved: Vec<[f64; 2]> = r.iter().map(|x| [x[0] + shift, x[1]]).collect();
        prop_assert_eq!(pen.evaluate(&traj(&moved, 0.01)), pen.evaluate(&traj(&r, 0.01)));
        for g in pen.state_gradient(&traj(&r, 0.01)) {
            prop_assert_eq!(g[0], 0.0);
        }
    }

    #[test]
    fn extreme_arguments_stay_finite(x in -1e3f64..1e3) {
        // beta * (x - threshold) spans roughly +-1e4.
        let pen = OvershootPenalty::new(1, 0.0, 10.0).unwrap();
        let t = traj(&[[0.0, x], [0.0, -x]], 0.01);
        prop_assert!(pen.evaluate(&t).is_finite());
        prop_assert!(pen.state_gradient(&t).iter().all(|g| g.iter().all(|v| v.is_finite())));
    }
}

#[test]
fn single_and_repeated_trajectories() {
    let pen = OvershootPenalty::new(1, 0.5, 10.0).unwrap();
    let t = traj(&[[0.0, 1.0], [0.0, 0.7], [0.0, 0.2]], 0.1);
    let one = pen.evaluate(&t);
    assert_eq!(aggregate_objective(&pen, std::slice::from_ref(&t), Aggregation::Sum).unwrap(), one);
    let three = vec![t.clone(), t.clone(), t];
    assert!((aggregate_objective(&pen, &three, Aggregation::Sum).unwrap() - 3.0 * one).abs() < 1e-15);
    assert!((aggregate_objective(&pen, &three, Aggregation::Mean).unwrap() - one).abs() < 1e-15);
}

#[test]
fn far_below_threshold_approaches_offset() {
    let pen = OvershootPenalty::new(0, 100.0, 10.0).unwrap();
    let rows: Vec<[f64; 2]> = (0..=1500).map(|_| [0.0, 0.0]).collect();
    let l = pen.evaluate(&traj(&rows, 0.01));
    let expect = -1501.0 * 0.01 * std::f64::consts::LN_2 / 10.0;
    assert!((l - expect).abs() < 1e-12);
}
