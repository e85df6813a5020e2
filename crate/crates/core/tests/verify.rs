mod common;

use pis_core::nominal::ValueFunction;
use pis_core::simulate::rollout;
use pis_core::verify::{gain_scaling_check, iss_check, lyapunov_decrease_check, windowed_sine, CheckKind, Envelope};
use pis_core::DVector;

fn tuned_like_theta() -> DVector<f64> {
    common::pseudo_random(21, 11, 0.02)
}

/// Weights on pure even powers only, so `mbar >= 0` everywhere and the
/// shaped cost stays non-negative as the stability results assume.
fn nonnegative_theta(sol: &pis_core::shaping::ShapingSolution) -> DVector<f64> {
    let basis = &sol.problem().basis_m;
    let mut theta = DVector::zeros(basis.len());
    for e in [[2, 0, 0], [0, 2, 0], [0, 0, 2], [4, 0, 0], [0, 4, 0], [0, 0, 4]] {
        theta[basis.position(&e).unwrap()] = 0.05;
    }
    theta
}

#[test]
fn origin_stays_put() {
    let sol = common::lti_solution();
    let out = lyapunov_decrease_check(&sol, &tuned_like_theta(), &DVector::zeros(3), 5.0, 0.01, Envelope::default())
        .unwrap();
    let traj = out.trajectory.unwrap();
    assert!(traj.states.iter().all(|x| x.iter().all(|&v| v == 0.0)));
    assert_eq!(out.report.max_lyapunov_increase, 0.0);
    assert!(out.report.passed());
}

#[test]
fn zero_theta_matches_nominal_loop() {
    let sol = common::lti_solution();
    let x0 = common::lti_x0();
    let out = lyapunov_decrease_check(&sol, &DVector::zeros(21), &x0, 15.0, 0.01, Envelope::default()).unwrap();
    let phi0 = &sol.problem().phi0;
    let weight = &sol.problem().weight;
    let nominal = |x: &DVector<f64>| phi0.optimal_control(sol.system(), weight, x);
    let reference = rollout(sol.system(), &nominal, &x0, 15.0, 0.01, None).unwrap();
    let traj = out.trajectory.unwrap();
    let dev = traj.states.iter().zip(&reference.states).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
    assert!(dev < 1e-10);
    let ValueFunction::Quadratic { .. } = phi0 else { unreachable!() };
    let max_inc = reference
        .states
        .windows(2)
        .map(|w| phi0.value(&w[1]) - phi0.value(&w[0]))
        .fold(0.0, f64::max);
    assert!((out.report.max_lyapunov_increase - max_inc).abs() < 1e-9);
    assert!(out.report.passed());
}

#[test]
fn unit_gain_reproduces_base_check() {
    let sol = common::lti_solution();
    let theta = tuned_like_theta();
    let x0 = common::lti_x0();
    let base = lyapunov_decrease_check(&sol, &theta, &x0, 15.0, 0.01, Envelope::default()).unwrap();
    let gain = gain_scaling_check(&sol, &theta, 0.5, &x0, 15.0, 0.01, Envelope::default()).unwrap();
    assert_eq!(base.trajectory.unwrap(), gain.trajectory.unwrap());
    assert_eq!(base.report.max_lyapunov_increase, gain.report.max_lyapunov_increase);
    assert_eq!(gain.report.check, CheckKind::GainScaling { epsilon: 0.5 });
}

#[test]
fn zero_disturbance_reproduces_base_check() {
    let sol = common::lti_solution();
    let theta = tuned_like_theta();
    let x0 = common::lti_x0();
    let base = lyapunov_decrease_check(&sol, &theta, &x0, 15.0, 0.01, Envelope::default()).unwrap();
    let zero = |_t: f64| DVector::zeros(1);
    let iss = iss_check(&sol, &theta, &zero, &x0, 15.0, 0.01, Envelope::default()).unwrap();
    assert_eq!(base.trajectory.unwrap(), iss.trajectory.unwrap());
    assert_eq!(iss.report.lyapunov_ok, None);
}

#[test]
fn gain_margin_holds_on_both_sides() {
    let sol = common::lti_solution();
    let theta = nonnegative_theta(&sol);
    assert!(sol.nonnegativity(&theta, 500).unwrap().min_mbar >= 0.0);
    for eps in [0.05, 2.0] {
        let out = gain_scaling_check(&sol, &theta, eps, &common::lti_x0(), 30.0, 0.01, Envelope::default()).unwrap();
        assert!(out.report.terminal_norm < 0.1, "eps {eps}: {}", out.report.terminal_norm);
        assert_eq!(out.report.lyapunov_ok, Some(true), "{}", out.report.to_key_values());
    }
    assert!(gain_scaling_check(&sol, &theta, 0.0, &common::lti_x0(), 1.0, 0.01, Envelope::default()).is_err());
}

#[test]
fn larger_disturbance_gives_larger_excursion() {
    let sol = common::lti_solution();
    let theta = tuned_like_theta();
    let x0 = common::lti_x0();
    let sup = |amp: f64| {
        let v = windowed_sine(amp, 1, 25.0);
        let out = iss_check(&sol, &theta, &v, &x0, 50.0, 0.01, Envelope::default()).unwrap();
        assert!(out.report.bounded_ok && out.report.terminal_ok, "{}", out.report.to_key_values());
        out.report.sup_state_norm
    };
    // Start at the origin so the excursion is due to the disturbance alone.
    let from_origin = |amp: f64| {
        let v = windowed_sine(amp, 1, 25.0);
        iss_check(&sol, &theta, &v, &DVector::zeros(3), 50.0, 0.01, Envelope::default())
            .unwrap()
            .report
            .sup_state_norm
    };
    assert!(sup(0.5).is_finite() && sup(1.0).is_finite());
    assert!(from_origin(1.0) > from_origin(0.5));
}

#[test]
fn lyapunov_slack_shrinks_with_step() {
    let sol = common::lti_solution();
    let theta = tuned_like_theta();
    let x0 = common::lti_x0();
    let coarse = lyapunov_decrease_check(&sol, &theta, &x0, 15.0, 0.01, Envelope::for_step(0.01)).unwrap();
    let fine = lyapunov_decrease_check(&sol, &theta, &x0, 15.0, 0.001, Envelope::for_step(0.001)).unwrap();
    assert!(coarse.report.max_lyapunov_increase < 1e-6);
    assert!(fine.report.max_lyapunov_increase <= coarse.report.max_lyapunov_increase / 10.0);
}

#[test]
fn divergence_is_reported_not_raised() {
    let sol = common::lti_solution();
    let wild = DVector::from_element(21, -500.0);
    let out = lyapunov_decrease_check(&sol, &wild, &common::lti_x0(), 15.0, 0.01, Envelope::default()).unwrap();
    assert!(out.trajectory.is_none());
    assert!(out.report.diverged_at.is_some());
    assert!(!out.report.passed());
    assert!(out.report.max_lyapunov_increase.is_finite() && out.report.terminal_norm.is_finite());
}
