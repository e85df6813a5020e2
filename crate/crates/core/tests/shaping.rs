mod common;

use pis_core::nominal::hjb_residual;
use pis_core::sampling::BoxDomain;
use pis_core::shaping::{assemble_collocation, solve_shaping};
use pis_core::simulate::rollout;
use pis_core::{DMatrix, DVector};

#[test]
fn exact_toy_recovers_half_theta() {
    let sol = solve_shaping(&common::toy_problem(100, 3.0)).unwrap();
    for theta1 in [0.3, 1.0, 2.0, -0.7] {
        let theta = DVector::from_element(1, theta1);
        let c = sol.coefficients(&theta).unwrap();
        assert!((c[0] - theta1 / 2.0).abs() < 1e-12, "c1 = {} for theta1 = {theta1}", c[0]);
    }
}

#[test]
fn exact_toy_shaped_law_solves_shaped_hjb() {
    let sol = solve_shaping(&common::toy_problem(100, 3.0)).unwrap();
    let theta = DVector::from_element(1, 2.0);
    let law = sol.law(&theta).unwrap();
    for x in BoxDomain::symmetric(vec![3.0]).unwrap().halton(100, 500) {
        assert!(law.shaped_hjb_residual(&x).unwrap().abs() < 1e-10);
        // theta1 = 2 gives c1 = 1: u_p = u0 - (c1 / R) b x = -2x.
        assert!((law.control(&x).unwrap()[0] + 2.0 * x[0]).abs() < 1e-11);
    }
}

#[test]
fn coefficients_are_linear_in_theta() {
    let sol = common::lti_solution();
    let a = common::pseudo_random(21, 1, 1.0);
    let b = common::pseudo_random(21, 2, 1.0);
    let lhs = sol.coefficients(&(&a * 2.5 - &b * 0.75)).unwrap();
    let rhs = sol.coefficients(&a).unwrap() * 2.5 - sol.coefficients(&b).unwrap() * 0.75;
    assert!((&lhs - &rhs).amax() <= 1e-12 * rhs.amax());
}

#[test]
fn linear_collocation_is_exact() {
    // For an LTI nominal the closed-loop Lie derivative maps each homogeneous
    // degree onto itself invertibly, so every unit theta is matched exactly.
    let sol = common::lti_solution();
    assert!(sol.residual_rms().amax() < 1e-9, "{}", sol.residual_rms());
}

#[test]
fn identity_residual_is_rounding_level() {
    for sol in [common::lti_solution(), common::cart_solution()] {
        let domain = sol.problem().domain.clone();
        for (k, x) in domain.halton(200, 3000).into_iter().enumerate() {
            let theta = common::pseudo_random(sol.q_dim(), k as u64, 1.0);
            let r = sol.identity_residual(&theta, &x).unwrap();
            assert!(r.abs() < 1e-9, "residual {r:e} at {x}");
        }
    }
}

#[test]
fn zero_theta_is_the_nominal_law() {
    let sol = common::lti_solution();
    let law = sol.law(&DVector::zeros(21)).unwrap();
    let x0 = common::lti_x0();
    let shaped = rollout(sol.system(), &law.controller(), &x0, 15.0, 0.01, None).unwrap();
    let phi0 = &sol.problem().phi0;
    let weight = &sol.problem().weight;
    let nominal = |x: &DVector<f64>| phi0.optimal_control(sol.system(), weight, x);
    let reference = rollout(sol.system(), &nominal, &x0, 15.0, 0.01, None).unwrap();
    let dev = shaped
        .states
        .iter()
        .zip(&reference.states)
        .map(|(a, b)| (a - b).amax())
        .fold(0.0, f64::max);
    assert!(dev < 1e-10);
}

#[test]
fn shaped_value_decreases_by_added_cost() {
    // Along the shaped closed loop the shaped HJB gives
    // d(phi_p)/dt = -(m0 + v + |u_p|_R^2), exactly for an LTI nominal.
    let sol = common::lti_solution();
    let theta = common::pseudo_random(21, 9, 0.2);
    let law = sol.law(&theta).unwrap();
    let sys = sol.system();
    for x in BoxDomain::symmetric(vec![2.0, 2.0, 2.0]).unwrap().halton(50, 0) {
        let u = law.control(&x).unwrap();
        let effort = sol.problem().weight.norm_sq(&u);
        let rate = sys.f(&x) + sys.g(&x) * u;
        let decay = law.gradient(&x).unwrap().dot(&rate);
        let cost = sol.problem().cost.eval(&x) + law.added_cost(&x).unwrap().total + effort;
        assert!((decay + cost).abs() < 1e-7 * cost.abs().max(1.0), "{decay} vs {cost}");
    }
}

#[test]
fn control_sensitivity_matches_finite_differences() {
    let sol = common::lti_solution();
    let x = DVector::from_vec(vec![1.2, -0.7, 0.4]);
    let sens = sol.control_sensitivity(&x).unwrap();
    let theta = common::pseudo_random(21, 4, 0.5);
    let eps = 1e-4;
    for j in 0..21 {
        let mut up = theta.clone();
        up[j] += eps;
        let mut dn = theta.clone();
        dn[j] -= eps;
        let fd = (sol.shaped_control(&up, &x).unwrap() - sol.shaped_control(&dn, &x).unwrap()) / (2.0 * eps);
        assert!((fd[0] - sens[(0, j)]).abs() <= 1e-8 * sens.amax(), "column {j}");
    }
    assert_eq!(sol.control_sensitivity(&DVector::zeros(3)).unwrap(), DMatrix::zeros(1, 21));
}

#[test]
fn collocation_matrices_have_expected_shape() {
    let problem = common::lti_problem(4);
    let (a, b) = assemble_collocation(&problem).unwrap();
    assert_eq!(a.shape(), (2000, 21));
    assert_eq!(b.shape(), (2000, 21));
}

#[test]
fn nominal_hjb_residual_is_inherited() {
    // Shaping adds exactly the residual of the nominal solution: on the toy,
    // both are zero; with a perturbed nominal the shaped residual moves with it.
    let mut problem = common::toy_problem(50, 2.0);
    problem.phi0 = pis_core::nominal::ValueFunction::Quadratic {
        p: DMatrix::from_element(1, 1, 1.1),
    };
    let sol = solve_shaping(&problem).unwrap();
    let theta = DVector::from_element(1, 0.8);
    let law = sol.law(&theta).unwrap();
    let m0 = |x: &DVector<f64>| x.norm_squared();
    for x in BoxDomain::symmetric(vec![2.0]).unwrap().halton(20, 0) {
        let nominal = hjb_residual(&problem.phi0, sol.system(), &m0, &problem.weight, &x).unwrap();
        let shaped = law.shaped_hjb_residual(&x).unwrap();
        assert!((shaped - nominal).abs() < 1e-10 * nominal.abs().max(1.0));
    }
}
