//! Trajectory-level design objectives.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::simulate::Trajectory;

/// A differentiable functional of a state trajectory.
pub trait DesignObjective: Send + Sync {
    fn evaluate(&self, traj: &Trajectory) -> f64;

    /// `dL/dx(t_k)` for every grid point `k`.
    fn state_gradient(&self, traj: &Trajectory) -> Vec<DVector<f64>>;
}

/// `log(1 + e^a)` without overflow for large `a`.
pub fn softplus(a: f64) -> f64 {
    if a > 0.0 {
        a + (-a).exp().ln_1p()
    } else {
        a.exp().ln_1p()
    }
}

pub fn logistic(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Smooth one-sided penalty on `x_c` rising above `threshold`:
///
/// `L = sum_k dt (softplus(beta (x_c(t_k) - threshold)) - ln 2) / beta`
///
/// summed over every grid point including `t = 0`. The `ln 2` offset makes
/// the penalty vanish exactly at the threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OvershootPenalty {
    component: usize,
    threshold: f64,
    beta: f64,
}

impl OvershootPenalty {
    pub fn new(component: usize, threshold: f64, beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
        }
        if !threshold.is_finite() {
            return Err(Error::InvalidArgument("threshold must be finite".into()));
        }
        Ok(OvershootPenalty {
            component,
            threshold,
            beta,
        })
    }

    pub fn component(&self) -> usize {
        self.component
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    fn arg(&self, x: &DVector<f64>) -> f64 {
        assert!(
            self.component < x.len(),
            "penalized component {} outside a {}-state trajectory",
            self.component,
            x.len()
        );
        self.beta * (x[self.component] - self.threshold)
    }
}

impl DesignObjective for OvershootPenalty {
    fn evaluate(&self, traj: &Trajectory) -> f64 {
        let ln2 = std::f64::consts::LN_2;
        traj.states
            .iter()
            .map(|x| traj.dt * (softplus(self.arg(x)) - ln2) / self.beta)
            .sum()
    }

    fn state_gradient(&self, traj: &Trajectory) -> Vec<DVector<f64>> {
        traj.states
            .iter()
            .map(|x| {
                let mut g = DVector::zeros(x.len());
                g[self.component] = traj.dt * logistic(self.arg(x));
                g
            })
            .collect()
    }
}

/// How per-trajectory objectives combine over a set of initial conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    #[default]
    Sum,
    /// `1/k` times the sum: a sample mean over an initial-state distribution.
    Mean,
}

impl Aggregation {
    pub fn weight(self, count: usize) -> f64 {
        match self {
            Aggregation::Sum => 1.0,
            Aggregation::Mean => 1.0 / count as f64,
        }
    }
}

pub fn aggregate_objective(
    objective: &dyn DesignObjective,
    trajs: &[Trajectory],
    mode: Aggregation,
) -> Result<f64> {
    if trajs.is_empty() {
        return Err(Error::InvalidArgument("no trajectories to aggregate".into()));
    }
    let total: f64 = trajs.iter().map(|t| objective.evaluate(t)).sum();
    Ok(total * mode.weight(trajs.len()))
}
