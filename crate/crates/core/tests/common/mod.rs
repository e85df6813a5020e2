#![allow(dead_code)]

use std::sync::Arc;

use pis_core::dynamics::{CartPole, LinearSystem};
use pis_core::nominal::{
    fit_nominal_policy_iteration, solve_care, ControlWeight, PolicyIterationOptions, StateCost, ValueFunction,
};
use pis_core::polybasis::enumerate_even_monomials;
use pis_core::sampling::BoxDomain;
use pis_core::shaping::{solve_shaping, ShapingProblem, ShapingSolution, DEFAULT_RIDGE};
use pis_core::{DMatrix, DVector};

pub fn lti() -> LinearSystem {
    LinearSystem::third_order(2.0, 0.1)
}

pub fn lti_x0() -> DVector<f64> {
    DVector::from_vec(vec![-5.0, 0.0, 0.0])
}

pub fn lti_problem(basis_degree: u32) -> ShapingProblem {
    let sys = lti();
    let cost = StateCost::quadratic(DMatrix::identity(3, 3)).unwrap();
    let weight = ControlWeight::scalar(1.0).unwrap();
    let care = solve_care(sys.a(), sys.b(), &cost, &weight, 1e-10).unwrap();
    let basis = enumerate_even_monomials(3, basis_degree).unwrap();
    ShapingProblem {
        system: Arc::new(sys),
        cost,
        weight,
        phi0: care.value_function(),
        basis_m: basis.clone(),
        basis_h: basis,
        domain: BoxDomain::symmetric(vec![6.0, 8.0, 5.0]).unwrap(),
        samples: 2000,
        ridge: DEFAULT_RIDGE,
    }
}

pub fn lti_solution() -> ShapingSolution {
    solve_shaping(&lti_problem(4)).unwrap()
}

pub fn cart_domain() -> BoxDomain {
    BoxDomain::symmetric(vec![6.0, 0.7, 3.0, 2.5]).unwrap()
}

pub fn cart_solution() -> ShapingSolution {
    let sys = CartPole::default();
    let cost = StateCost::quadratic(DMatrix::identity(4, 4)).unwrap();
    let weight = ControlWeight::scalar(1.0).unwrap();
    let domain = cart_domain();
    let vb = enumerate_even_monomials(4, 4).unwrap();
    let pi = fit_nominal_policy_iteration(&sys, &cost, &weight, &vb, &domain, &PolicyIterationOptions::default())
        .unwrap();
    let scale: Vec<f64> = domain.hi().iter().copied().collect();
    let basis = enumerate_even_monomials(4, 4).unwrap().with_scale(scale).unwrap();
    solve_shaping(&ShapingProblem {
        system: Arc::new(sys),
        cost,
        weight,
        phi0: pi.value,
        basis_m: basis.clone(),
        basis_h: basis,
        domain,
        samples: 2000,
        ridge: DEFAULT_RIDGE,
    })
    .unwrap()
}

/// `xdot = u`, `Q = R = 1`: `phi0 = x^2` exactly, closed loop `xdot = -x`.
pub fn toy_problem(samples: usize, half_width: f64) -> ShapingProblem {
    let sys = LinearSystem::new("toy", DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, 1.0)).unwrap();
    let basis = enumerate_even_monomials(1, 2).unwrap();
    ShapingProblem {
        system: Arc::new(sys),
        cost: StateCost::quadratic(DMatrix::from_element(1, 1, 1.0)).unwrap(),
        weight: ControlWeight::scalar(1.0).unwrap(),
        phi0: ValueFunction::Quadratic {
            p: DMatrix::from_element(1, 1, 1.0),
        },
        basis_m: basis.clone(),
        basis_h: basis,
        domain: BoxDomain::symmetric(vec![half_width]).unwrap(),
        samples,
        ridge: DEFAULT_RIDGE,
    }
}

pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

/// Deterministic pseudo-random vector with entries in `[-scale, scale]`.
pub fn pseudo_random(len: usize, seed: u64, scale: f64) -> DVector<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(len, |_, _| scale * (2.0 * rng.random::<f64>() - 1.0))
}
