//! Numerical spot checks of the stability properties of a shaped law.
//!
//! Every check rolls out one closed loop from one initial condition and
//! judges it against an [`Envelope`]. A passing report certifies that rollout
//! only; it says nothing about initial conditions or disturbances that were
//! not simulated.

use std::fmt::Write as _;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::shaping::ShapingSolution;
use crate::simulate::{rollout, Disturbance, Trajectory};

/// Acceptance thresholds for a report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Envelope {
    /// Largest tolerated single-step increase of `phi_p`. The increase of
    /// an exact solution is never positive, so the slack only absorbs
    /// integration error and should shrink with `dt`.
    pub lyapunov_tol: f64,
    pub terminal_tol: f64,
    pub sup_bound: f64,
}

impl Default for Envelope {
    fn default() -> Self {
        Envelope::for_step(0.01)
    }
}

impl Envelope {
    /// Default envelope with the Lyapunov slack scaled linearly in `dt`
    /// (1e-6 at `dt = 0.01`).
    pub fn for_step(dt: f64) -> Self {
        Envelope {
            lyapunov_tol: dt / 1e4,
            terminal_tol: 0.05,
            sup_bound: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CheckKind {
    Lyapunov,
    GainScaling { epsilon: f64 },
    Iss,
}

impl CheckKind {
    pub fn label(&self) -> String {
        match self {
            CheckKind::Lyapunov => "lyapunov".into(),
            CheckKind::GainScaling { epsilon } => format!("gain_scaling_eps_{epsilon}"),
            CheckKind::Iss => "iss".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub check: CheckKind,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub dt: f64,
    pub envelope: Envelope,
    /// `max(0, max_k phi_p(x_{k+1}) - phi_p(x_k))`.
    pub max_lyapunov_increase: f64,
    pub terminal_norm: f64,
    pub sup_state_norm: f64,
    /// Time at which the rollout was stopped by the divergence guard.
    pub diverged_at: Option<f64>,
    /// `None` when the check does not judge Lyapunov decrease (ISS: the
    /// disturbance may legitimately raise `phi_p`).
    pub lyapunov_ok: Option<bool>,
    pub terminal_ok: bool,
    pub bounded_ok: bool,
}

impl StabilityReport {
    pub fn passed(&self) -> bool {
        self.diverged_at.is_none() && self.lyapunov_ok != Some(false) && self.terminal_ok && self.bounded_ok
    }

    /// `key = value` lines, one per field.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let fmt_vec = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        let _ = writeln!(s, "check = \"{}\"", self.check.label());
        if let CheckKind::GainScaling { epsilon } = self.check {
            let _ = writeln!(s, "epsilon = {epsilon}");
            let _ = writeln!(s, "gain = {}", 0.5 + epsilon);
        }
        let _ = writeln!(s, "x0 = [{}]", fmt_vec(&self.x0));
        let _ = writeln!(s, "horizon = {}", self.horizon);
        let _ = writeln!(s, "dt = {}", self.dt);
        let _ = writeln!(s, "lyapunov_tol = {}", self.envelope.lyapunov_tol);
        let _ = writeln!(s, "terminal_tol = {}", self.envelope.terminal_tol);
        let _ = writeln!(s, "sup_bound = {}", self.envelope.sup_bound);
        let _ = writeln!(s, "max_lyapunov_increase = {}", self.max_lyapunov_increase);
        let _ = writeln!(s, "terminal_norm = {}", self.terminal_norm);
        let _ = writeln!(s, "sup_state_norm = {}", self.sup_state_norm);
        if let Some(t) = self.diverged_at {
            let _ = writeln!(s, "diverged_at = {t}");
        }
        if let Some(ok) = self.lyapunov_ok {
            let _ = writeln!(s, "lyapunov_ok = {ok}");
        }
        let _ = writeln!(s, "terminal_ok = {}", self.terminal_ok);
        let _ = writeln!(s, "bounded_ok = {}", self.bounded_ok);
        let _ = writeln!(s, "passed = {}", self.passed());
        s
    }
}

/// A checked rollout: the report plus the trajectory when one was completed.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub report: StabilityReport,
    pub trajectory: Option<Trajectory>,
}

struct Setup<'a> {
    solution: &'a ShapingSolution,
    theta: &'a DVector<f64>,
    x0: &'a DVector<f64>,
    horizon: f64,
    dt: f64,
    envelope: Envelope,
}

fn run(
    setup: Setup<'_>,
    check: CheckKind,
    gain: f64,
    disturbance: Option<Disturbance<'_>>,
) -> Result<CheckOutcome> {
    let law = setup.solution.law(setup.theta)?;
    let base = law.controller();
    let scaled = |x: &DVector<f64>| base(x) * gain;
    let controller: &(dyn Fn(&DVector<f64>) -> DVector<f64> + Sync) = if gain == 1.0 { &base } else { &scaled };
    let judge_lyapunov = !matches!(check, CheckKind::Iss);
    let x0: Vec<f64> = setup.x0.iter().copied().collect();

    let traj = match rollout(setup.solution.system(), controller, setup.x0, setup.horizon, setup.dt, disturbance) {
        Ok(t) => t,
        Err(Error::Divergence { time, norm, .. }) => {
            return Ok(CheckOutcome {
                report: StabilityReport {
                    check,
                    x0,
                    horizon: setup.horizon,
                    dt: setup.dt,
                    envelope: setup.envelope,
                    max_lyapunov_increase: f64::MAX,
                    terminal_norm: norm,
                    sup_state_norm: norm,
                    diverged_at: Some(time),
                    lyapunov_ok: judge_lyapunov.then_some(false),
                    terminal_ok: false,
                    bounded_ok: false,
                },
                trajectory: None,
            })
        }
        Err(e) => return Err(e),
    };

    let phi = law.value_function();
    let values: Vec<f64> = traj.states.iter().map(|x| phi.value(x)).collect();
    let max_increase = values.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    let terminal_norm = traj.final_state().norm();
    let sup_state_norm = traj.sup_norm();
    let env = setup.envelope;
    Ok(CheckOutcome {
        report: StabilityReport {
            check,
            x0,
            horizon: setup.horizon,
            dt: setup.dt,
            envelope: env,
            max_lyapunov_increase: max_increase,
            terminal_norm,
            sup_state_norm,
            diverged_at: None,
            lyapunov_ok: judge_lyapunov.then_some(max_increase < env.lyapunov_tol),
            terminal_ok: terminal_norm < env.terminal_tol,
            bounded_ok: sup_state_norm < env.sup_bound,
        },
        trajectory: Some(traj),
    })
}

/// Rolls out the shaped loop and measures the largest step increase of `phi_p`.
pub fn lyapunov_decrease_check(
    solution: &ShapingSolution,
    theta: &DVector<f64>,
    x0: &DVector<f64>,
    horizon: f64,
    dt: f64,
    envelope: Envelope,
) -> Result<CheckOutcome> {
    let setup = Setup { solution, theta, x0, horizon, dt, envelope };
    run(setup, CheckKind::Lyapunov, 1.0, None)
}

/// Rolls out with the law scaled to `(1/2 + epsilon) u_p`.
pub fn gain_scaling_check(
    solution: &ShapingSolution,
    theta: &DVector<f64>,
    epsilon: f64,
    x0: &DVector<f64>,
    horizon: f64,
    dt: f64,
    envelope: Envelope,
) -> Result<CheckOutcome> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let setup = Setup { solution, theta, x0, horizon, dt, envelope };
    run(setup, CheckKind::GainScaling { epsilon }, 0.5 + epsilon, None)
}

/// Rolls out `xdot = f + g (u_p + v(t))`. The terminal verdict is only
/// meaningful if `v` has been switched off well before `horizon`.
pub fn iss_check(
    solution: &ShapingSolution,
    theta: &DVector<f64>,
    disturbance: Disturbance<'_>,
    x0: &DVector<f64>,
    horizon: f64,
    dt: f64,
    envelope: Envelope,
) -> Result<CheckOutcome> {
    let setup = Setup { solution, theta, x0, horizon, dt, envelope };
    run(setup, CheckKind::Iss, 1.0, Some(disturbance))
}

/// `v(t) = amplitude sin(t)` in every input channel for `t < until`, zero after.
pub fn windowed_sine(amplitude: f64, inputs: usize, until: f64) -> impl Fn(f64) -> DVector<f64> + Sync {
    move |t| {
        let v = if t < until { amplitude * t.sin() } else { 0.0 };
        DVector::from_element(inputs, v)
    }
}
