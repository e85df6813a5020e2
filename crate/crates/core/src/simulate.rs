//! Fixed-step RK4 integration and closed-loop rollouts.
//!
//! The feedback law is evaluated at every RK4 stage (no zero-order hold), so a
//! rollout integrates the continuous-time closed loop.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};

use crate::dynamics::ControlAffine;
use crate::error::{check_dim, Error, Result};

/// State norm beyond which a rollout is declared divergent.
pub const DEFAULT_BLOWUP: f64 = 1e6;

/// Additive input disturbance `v(t)`, entering through `g(x)`.
pub type Disturbance<'a> = &'a (dyn Fn(f64) -> DVector<f64> + Sync);

/// Classical RK4 step of an autonomous-in-form field `xdot = field(t, x)`.
pub fn rk4<F>(field: F, t: f64, x: &DVector<f64>, dt: f64) -> DVector<f64>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let k1 = field(t, x);
    let k2 = field(t + 0.5 * dt, &(x + &k1 * (0.5 * dt)));
    let k3 = field(t + 0.5 * dt, &(x + &k2 * (0.5 * dt)));
    let k4 = field(t + dt, &(x + &k3 * dt));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Closed-loop rate `f(x) + g(x) (u(x) + v(t))`.
pub fn closed_loop_rate<C>(
    system: &dyn ControlAffine,
    controller: &C,
    disturbance: Option<Disturbance<'_>>,
    t: f64,
    x: &DVector<f64>,
) -> DVector<f64>
where
    C: Fn(&DVector<f64>) -> DVector<f64> + ?Sized,
{
    let mut u = controller(x);
    if let Some(v) = disturbance {
        u += v(t);
    }
    system.f(x) + system.g(x) * u
}

/// One RK4 step of the closed loop, with the controller re-evaluated per stage.
pub fn rk4_step<C>(
    system: &dyn ControlAffine,
    controller: &C,
    x: &DVector<f64>,
    dt: f64,
    disturbance: Option<Disturbance<'_>>,
    t: f64,
) -> Result<DVector<f64>>
where
    C: Fn(&DVector<f64>) -> DVector<f64> + ?Sized,
{
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {dt}")));
    }
    check_dim("state", x.len(), system.n())?;
    let next = rk4(
        |t, x| closed_loop_rate(system, controller, disturbance, t, x),
        t,
        x,
        dt,
    );
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow { time: t + dt });
    }
    Ok(next)
}

/// Number of grid intervals covering `horizon` with step `dt`.
pub fn step_count(horizon: f64, dt: f64) -> Result<usize> {
    if !(horizon > 0.0) || !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "horizon and dt must be positive (horizon={horizon}, dt={dt})"
        )));
    }
    Ok((horizon / dt).round().max(1.0) as usize)
}

/// States on the uniform grid `t_k = k dt`, with the input applied on
/// `[t_k, t_{k+1})` logged at each interval start.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.time(k)).collect()
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least the initial state")
    }

    /// Largest value of state component `c` over the grid.
    pub fn peak(&self, c: usize) -> f64 {
        self.states.iter().map(|x| x[c]).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest `|x_c|` over the grid.
    pub fn peak_abs(&self, c: usize) -> f64 {
        self.states.iter().map(|x| x[c].abs()).fold(0.0, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.states.iter().map(|x| x.norm()).fold(0.0, f64::max)
    }

    /// Stacked states, one row per grid point.
    pub fn state_matrix(&self) -> DMatrix<f64> {
        let n = self.states.first().map_or(0, |x| x.len());
        DMatrix::from_fn(self.len(), n, |k, j| self.states[k][j])
    }

    /// Writes `t,x1,...,xn,u1,...,up`, one row per grid point; the final row
    /// leaves the input fields empty.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let n = self.states.first().map_or(0, |x| x.len());
        let p = self.inputs.first().map_or(0, |u| u.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=p).map(|i| format!("u{i}")));
        writeln!(w, "{}", header.join(","))?;
        for (k, x) in self.states.iter().enumerate() {
            let mut row = vec![format!("{}", self.time(k))];
            row.extend(x.iter().map(|v| format!("{v}")));
            match self.inputs.get(k) {
                Some(u) => row.extend(u.iter().map(|v| format!("{v}"))),
                None => row.extend(std::iter::repeat_n(String::new(), p)),
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Closed-loop rollout with the default divergence bound.
pub fn rollout<C>(
    system: &dyn ControlAffine,
    controller: &C,
    x0: &DVector<f64>,
    horizon: f64,
    dt: f64,
    disturbance: Option<Disturbance<'_>>,
) -> Result<Trajectory>
where
    C: Fn(&DVector<f64>) -> DVector<f64> + ?Sized,
{
    rollout_bounded(system, controller, x0, horizon, dt, disturbance, DEFAULT_BLOWUP)
}

pub fn rollout_bounded<C>(
    system: &dyn ControlAffine,
    controller: &C,
    x0: &DVector<f64>,
    horizon: f64,
    dt: f64,
    disturbance: Option<Disturbance<'_>>,
    blowup: f64,
) -> Result<Trajectory>
where
    C: Fn(&DVector<f64>) -> DVector<f64> + ?Sized,
{
    check_dim("initial state", x0.len(), system.n())?;
    let steps = step_count(horizon, dt)?;
    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs = Vec::with_capacity(steps);
    let mut x = x0.clone();
    for k in 0..steps {
        let t = k as f64 * dt;
        let mut u = controller(&x);
        if let Some(v) = disturbance {
            u += v(t);
        }
        inputs.push(u);
        let next = rk4_step(system, controller, &x, dt, disturbance, t)?;
        states.push(std::mem::replace(&mut x, next));
        let norm = x.norm();
        if norm > blowup {
            return Err(Error::Divergence {
                time: (k + 1) as f64 * dt,
                norm,
                bound: blowup,
            });
        }
    }
    states.push(x);
    Ok(Trajectory { dt, states, inputs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::LinearSystem;

    fn decay() -> LinearSystem {
        LinearSystem::new(
            "decay",
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::zeros(1, 1),
        )
        .unwrap()
    }

    fn zero_u(_: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(1)
    }

    #[test]
    fn rk4_scalar_decay_step() {
        let sys = decay();
        let x = rk4_step(&sys, &zero_u, &DVector::from_element(1, 1.0), 0.1, None, 0.0).unwrap();
        // 1 - h + h^2/2 - h^3/6 + h^4/24 at h = 0.1
        let hand = 1.0 - 0.1 + 0.005 - 0.001 / 6.0 + 0.0001 / 24.0;
        assert!((x[0] - hand).abs() < 1e-15);
        assert!((x[0] - 0.9048375).abs() < 1e-7);
    }

    #[test]
    fn rk4_fourth_order_local_error() {
        let sys = decay();
        let err = |h: f64| {
            let x = rk4_step(&sys, &zero_u, &DVector::from_element(1, 1.0), h, None, 0.0).unwrap();
            (x[0] - (-h).exp()).abs()
        };
        // local error is O(h^5): 32x per halving; at least 16x per the global-order claim
        let ratio = err(0.1) / err(0.05);
        assert!(ratio > 16.0, "ratio {ratio}");
    }

    #[test]
    fn rk4_global_error_order_four() {
        let sys = decay();
        let global = |h: f64| {
            let tr = rollout(&sys, &zero_u, &DVector::from_element(1, 1.0), 1.0, h, None).unwrap();
            (tr.final_state()[0] - (-1.0f64).exp()).abs()
        };
        let ratio = global(0.1) / global(0.05);
        assert!((ratio - 16.0).abs() < 1.5, "ratio {ratio}");
    }

    #[test]
    fn equilibrium_preserved() {
        let sys = LinearSystem::third_order(2.0, 0.1);
        let tr = rollout(&sys, &|_: &DVector<f64>| DVector::zeros(1), &DVector::zeros(3), 1.0, 0.01, None)
            .unwrap();
        assert!(tr.states.iter().all(|x| x.iter().all(|&v| v == 0.0)));
        assert!(tr.inputs.iter().all(|u| u[0] == 0.0));
    }

    #[test]
    fn grid_shape() {
        let sys = decay();
        let tr = rollout(&sys, &zero_u, &DVector::from_element(1, 1.0), 1.0, 0.1, None).unwrap();
        assert_eq!(tr.states.len(), 11);
        assert_eq!(tr.inputs.len(), 10);
        assert_eq!(tr.states[0][0], 1.0);
    }

    #[test]
    fn divergence_reported() {
        let sys = LinearSystem::new(
            "growth",
            DMatrix::from_element(1, 1, 5.0),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let err = rollout(&sys, &zero_u, &DVector::from_element(1, 1.0), 10.0, 0.01, None).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn rejects_nonpositive_step() {
        let sys = decay();
        assert!(rk4_step(&sys, &zero_u, &DVector::from_element(1, 1.0), 0.0, None, 0.0).is_err());
    }

    #[test]
    fn disturbance_enters_through_g() {
        let sys = LinearSystem::new("int", DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, 2.0)).unwrap();
        let v = |_t: f64| DVector::from_element(1, 1.0);
        let x = rk4_step(&sys, &zero_u, &DVector::zeros(1), 0.5, Some(&v), 0.0).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn csv_layout() {
        let sys = decay();
        let tr = rollout(&sys, &zero_u, &DVector::from_element(1, 1.0), 0.2, 0.1, None).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "t,x1,u1");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].ends_with(','));
        assert_eq!(lines[1], "0,1,0");
    }
}
