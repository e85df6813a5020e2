//! Gradient tuning of the shaping parameters against a design objective.
//!
//! The gradient of `L` with respect to `theta` is assembled by the chain rule
//! from `dL/dx(t_k)` and the forward sensitivity `S(t) = dx(t)/dtheta`, which
//! obeys the variational equation of the closed loop
//!
//! ```text
//! Sdot = [df/dx + sum_j dg_j/dx u_j + g du/dx] S + g du/dtheta,   S(0) = 0.
//! ```
//!
//! `du/dx` appears because the rollout runs under feedback. State and
//! sensitivity are integrated as one augmented RK4 system, so `S` is the exact
//! derivative of the discrete state map and agrees with finite differences of
//! rollouts up to differencing error.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::objective::{Aggregation, DesignObjective};
use crate::sampling::BoxDomain;
use crate::shaping::{NonnegativityReport, ShapedLaw, ShapingSolution};
use crate::simulate::{step_count, Trajectory, DEFAULT_BLOWUP};

/// `dx(t_k)/dtheta` on the grid of a parent trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityTrajectory {
    pub dt: f64,
    /// One `n x q` matrix per grid point.
    pub s: Vec<DMatrix<f64>>,
}

/// Right-hand side pieces of the augmented system at one state.
struct Stage {
    rate: DVector<f64>,
    input: DVector<f64>,
    /// Closed-loop Jacobian `df/dx + sum_j dg_j/dx u_j + g du/dx`.
    jac: Option<DMatrix<f64>>,
    /// Forcing `g du/dtheta`.
    forcing: Option<DMatrix<f64>>,
}

fn stage(solution: &ShapingSolution, law: &ShapedLaw<'_>, x: &DVector<f64>, sens: bool) -> Result<Stage> {
    let problem = solution.problem();
    let sys = solution.system();
    let weight = &problem.weight;
    let grads = problem.basis_h.gradients(x)?;
    let grad = problem.phi0.gradient(x) + &grads * law.coeffs();
    let g = sys.g(x);
    let input = -(weight.r_inv() * g.transpose() * &grad) * 0.5;
    let rate = sys.f(x) + &g * &input;
    if !sens {
        return Ok(Stage {
            rate,
            input,
            jac: None,
            forcing: None,
        });
    }

    let hess = problem.phi0.hessian(x) + problem.basis_h.hessian(x, law.coeffs())?;
    let dg = sys.dg_dx(x);
    let (n, p) = (sys.n(), sys.p());
    let mut d = DMatrix::zeros(p, n);
    for j in 0..p {
        let row = dg[j].transpose() * &grad + &hess * g.column(j);
        d.row_mut(j).copy_from(&row.transpose());
    }
    let du_dx = -(weight.r_inv() * d) * 0.5;
    let mut jac = sys.df_dx(x) + &g * du_dx;
    for j in 0..p {
        jac += &dg[j] * input[j];
    }
    let du_dtheta = -(weight.r_inv() * g.transpose() * grads * solution.map()) * 0.5;
    Ok(Stage {
        rate,
        input,
        jac: Some(jac),
        forcing: Some(g * du_dtheta),
    })
}

/// Shaped closed-loop rollout, optionally with the forward sensitivity.
pub fn shaped_rollout(
    solution: &ShapingSolution,
    theta: &DVector<f64>,
    x0: &DVector<f64>,
    horizon: f64,
    dt: f64,
    with_sensitivity: bool,
) -> Result<(Trajectory, Option<SensitivityTrajectory>)> {
    let steps = step_count(horizon, dt)?;
    integrate(solution, theta, x0, steps, dt, with_sensitivity)
}

fn integrate(
    solution: &ShapingSolution,
    theta: &DVector<f64>,
    x0: &DVector<f64>,
    steps: usize,
    dt: f64,
    sens: bool,
) -> Result<(Trajectory, Option<SensitivityTrajectory>)> {
    let n = solution.system().n();
    check_dim("initial state", x0.len(), n)?;
    let law = solution.law(theta)?;
    let q = solution.q_dim();

    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs = Vec::with_capacity(steps);
    let mut sens_out = Vec::with_capacity(if sens { steps + 1 } else { 0 });
    let mut x = x0.clone();
    let mut s = DMatrix::zeros(n, q);
    let half = 0.5 * dt;

    let s_rate = |st: &Stage, s: &DMatrix<f64>| -> DMatrix<f64> {
        st.jac.as_ref().expect("sensitivity stage") * s + st.forcing.as_ref().expect("sensitivity stage")
    };

    for k in 0..steps {
        let k1 = stage(solution, &law, &x, sens)?;
        inputs.push(k1.input.clone());
        let x2 = &x + &k1.rate * half;
        let k2 = stage(solution, &law, &x2, sens)?;
        let x3 = &x + &k2.rate * half;
        let k3 = stage(solution, &law, &x3, sens)?;
        let x4 = &x + &k3.rate * dt;
        let k4 = stage(solution, &law, &x4, sens)?;
        let next = &x + (&k1.rate + &k2.rate * 2.0 + &k3.rate * 2.0 + &k4.rate) * (dt / 6.0);

        let t_next = (k + 1) as f64 * dt;
        if sens {
            let l1 = s_rate(&k1, &s);
            let l2 = s_rate(&k2, &(&s + &l1 * half));
            let l3 = s_rate(&k3, &(&s + &l2 * half));
            let l4 = s_rate(&k4, &(&s + &l3 * dt));
            let s_next = &s + (l1 + l2 * 2.0 + l3 * 2.0 + l4) * (dt / 6.0);
            if s_next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericOverflow { time: t_next });
            }
            sens_out.push(std::mem::replace(&mut s, s_next));
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow { time: t_next });
        }
        states.push(std::mem::replace(&mut x, next));
        let norm = x.norm();
        if norm > DEFAULT_BLOWUP {
            return Err(Error::Divergence {
                time: t_next,
                norm,
                bound: DEFAULT_BLOWUP,
            });
        }
    }
    states.push(x);
    let traj = Trajectory { dt, states, inputs };
    let sens_traj = sens.then(|| {
        sens_out.push(s);
        SensitivityTrajectory { dt, s: sens_out }
    });
    Ok((traj, sens_traj))
}

/// `du/dtheta` at `x`, `p x q`.
pub fn control_sensitivity(solution: &ShapingSolution, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    solution.control_sensitivity(x)
}

/// Forward sensitivity along a trajectory produced by the shaped loop at `theta`.
pub fn propagate_sensitivity(
    solution: &ShapingSolution,
    theta: &DVector<f64>,
    traj: &Trajectory,
) -> Result<SensitivityTrajectory> {
    if traj.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    let (replay, sens) = integrate(solution, theta, &traj.states[0], traj.len() - 1, traj.dt, true)?;
    let scale = traj.sup_norm().max(1.0);
    let mismatch = replay
        .states
        .iter()
        .zip(&traj.states)
        .map(|(a, b)| (a - b).amax())
        .fold(0.0, f64::max);
    if mismatch > 1e-9 * scale {
        return Err(Error::InvalidArgument(format!(
            "trajectory was not produced by this shaped loop (state mismatch {mismatch:.3e})"
        )));
    }
    Ok(sens.expect("sensitivity requested"))
}

/// Grid settings shared by every rollout of a tuning problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutGrid {
    pub horizon: f64,
    pub dt: f64,
}

#[derive(Debug, Clone)]
pub struct ObjectiveEvaluation {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub trajectories: Vec<Trajectory>,
}

fn tag(index: usize, x0: &DVector<f64>) -> impl FnOnce(Error) -> Error + '_ {
    move |e| Error::Rollout {
        index,
        x0: x0.iter().copied().collect(),
        source: Box::new(e),
    }
}

/// Aggregate objective and its gradient `sum_i sum_k dL/dx(t_k)' S_i(t_k)`.
pub fn total_gradient(
    objective: &dyn DesignObjective,
    solution: &ShapingSolution,
    theta: &DVector<f64>,
    initial_conditions: &[DVector<f64>],
    grid: RolloutGrid,
    mode: Aggregation,
) -> Result<ObjectiveEvaluation> {
    if initial_conditions.is_empty() {
        return Err(Error::InvalidArgument("no initial conditions".into()));
    }
    let per_ic: Vec<(f64, DVector<f64>, Trajectory)> = initial_conditions
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let (traj, sens) = shaped_rollout(solution, theta, x0, grid.horizon, grid.dt, true)
                .map_err(tag(i, x0))?;
            let sens = sens.expect("sensitivity requested");
            let dl_dx = objective.state_gradient(&traj);
            let mut grad = DVector::zeros(solution.q_dim());
            for (g, s) in dl_dx.iter().zip(&sens.s) {
                grad += s.tr_mul(g);
            }
            Ok((objective.evaluate(&traj), grad, traj))
        })
        .collect::<Result<_>>()?;

    let w = mode.weight(initial_conditions.len());
    let mut value = 0.0;
    let mut gradient = DVector::zeros(solution.q_dim());
    let mut trajectories = Vec::with_capacity(per_ic.len());
    for (v, g, t) in per_ic {
        value += v;
        gradient += g;
        trajectories.push(t);
    }
    Ok(ObjectiveEvaluation {
        value: value * w,
        gradient: gradient * w,
        trajectories,
    })
}

/// Aggregate objective only.
pub fn objective_value(
    objective: &dyn DesignObjective,
    solution: &ShapingSolution,
    theta: &DVector<f64>,
    initial_conditions: &[DVector<f64>],
    grid: RolloutGrid,
    mode: Aggregation,
) -> Result<f64> {
    if initial_conditions.is_empty() {
        return Err(Error::InvalidArgument("no initial conditions".into()));
    }
    let values: Vec<f64> = initial_conditions
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let (traj, _) = shaped_rollout(solution, theta, x0, grid.horizon, grid.dt, false)
                .map_err(tag(i, x0))?;
            Ok(objective.evaluate(&traj))
        })
        .collect::<Result<_>>()?;
    Ok(values.iter().sum::<f64>() * mode.weight(initial_conditions.len()))
}

/// Central differences of an arbitrary scalar function of `theta`.
pub fn central_difference<F>(f: F, theta: &DVector<f64>, eps: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut grad = DVector::zeros(theta.len());
    for j in 0..theta.len() {
        let mut up = theta.clone();
        up[j] += eps;
        let mut dn = theta.clone();
        dn[j] -= eps;
        grad[j] = (f(&up)? - f(&dn)?) / (2.0 * eps);
    }
    Ok(grad)
}

/// Finite-difference oracle for [`total_gradient`]: `2 q` full pipeline runs.
pub fn finite_difference_gradient(
    objective: &dyn DesignObjective,
    solution: &ShapingSolution,
    theta: &DVector<f64>,
    initial_conditions: &[DVector<f64>],
    grid: RolloutGrid,
    mode: Aggregation,
    eps: f64,
) -> Result<DVector<f64>> {
    central_difference(
        |th| objective_value(objective, solution, th, initial_conditions, grid, mode),
        theta,
        eps,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialConditions {
    List(Vec<DVector<f64>>),
    /// `count` points drawn uniformly from a box with a seeded ChaCha8 stream.
    /// With `antithetic`, only `ceil(count / 2)` points are drawn and each is
    /// followed by its negation (the box must then be symmetric). For an
    /// odd-symmetric closed loop this makes a one-sided penalty act on both
    /// signs of the penalized component.
    UniformBox {
        domain: BoxDomain,
        count: usize,
        seed: u64,
        antithetic: bool,
    },
}

impl InitialConditions {
    pub fn resolve(&self) -> Result<Vec<DVector<f64>>> {
        match self {
            InitialConditions::List(v) => Ok(v.clone()),
            InitialConditions::UniformBox {
                domain,
                count,
                seed,
                antithetic,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut draw = || {
                    let unit: Vec<f64> = (0..domain.dim()).map(|_| rng.random::<f64>()).collect();
                    domain.scale(&unit)
                };
                if !antithetic {
                    return Ok((0..*count).map(|_| draw()).collect());
                }
                if domain.lo().iter().zip(domain.hi()).any(|(l, h)| *l != -*h) {
                    return Err(Error::InvalidArgument(
                        "antithetic sampling needs a box symmetric about the origin".into(),
                    ));
                }
                let mut out = Vec::with_capacity(*count + 1);
                while out.len() < *count {
                    let x = draw();
                    out.push(-&x);
                    out.insert(out.len() - 1, x);
                }
                out.truncate(*count);
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepRule {
    /// `theta -= gamma * grad`.
    Fixed,
    /// `theta -= gamma * grad / |grad|`.
    Normalized,
    /// Normalized direction with Armijo backtracking; divergent candidates
    /// count as rejected.
    #[default]
    Backtracking,
}

#[derive(Debug, Clone)]
pub struct TuningConfig {
    pub gamma: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub initial_conditions: InitialConditions,
    pub grid: RolloutGrid,
    pub step_rule: StepRule,
    pub aggregation: Aggregation,
    pub armijo_c: f64,
    pub shrink: f64,
    pub max_halvings: usize,
    /// Domain points used to monitor non-negativity of `mbar` and `h` after
    /// each step (0 disables the check).
    pub monitor_points: usize,
}

impl TuningConfig {
    pub fn new(gamma: f64, max_iter: usize, initial_conditions: InitialConditions, grid: RolloutGrid) -> Self {
        TuningConfig {
            gamma,
            max_iter,
            grad_tol: 1e-10,
            initial_conditions,
            grid,
            step_rule: StepRule::Backtracking,
            aggregation: Aggregation::Sum,
            armijo_c: 1e-4,
            shrink: 0.5,
            max_halvings: 40,
            monitor_points: 1000,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidArgument(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::InvalidArgument("shrink factor must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub objective: f64,
    pub grad_norm: f64,
    /// Length of the parameter step taken from this iterate (0 when none).
    pub step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxIter,
    GradientTolerance,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct TuningResult {
    pub theta: DVector<f64>,
    pub history: Vec<IterationRecord>,
    pub stop: StopReason,
    /// Non-negativity check after each accepted step, indexed like the
    /// history row of the iterate the step produced.
    pub monitor: Vec<(usize, NonnegativityReport)>,
}

impl TuningResult {
    pub fn initial_objective(&self) -> f64 {
        self.history.first().map_or(f64::NAN, |r| r.objective)
    }

    pub fn final_objective(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |r| r.objective)
    }
}

/// Gradient descent on `theta`, starting from `theta0` (zero when `None`,
/// i.e. the nominal law). The history holds one row per visited iterate; the
/// last row is the returned parameter with step 0.
pub fn gradient_descent(
    solution: &ShapingSolution,
    objective: &dyn DesignObjective,
    config: &TuningConfig,
    theta0: Option<DVector<f64>>,
) -> Result<TuningResult> {
    config.validate()?;
    let ics = config.initial_conditions.resolve()?;
    let mut theta = theta0.unwrap_or_else(|| DVector::zeros(solution.q_dim()));
    check_dim("theta0", theta.len(), solution.q_dim())?;
    let eval = |th: &DVector<f64>| total_gradient(objective, solution, th, &ics, config.grid, config.aggregation);
    let value = |th: &DVector<f64>| objective_value(objective, solution, th, &ics, config.grid, config.aggregation);

    let mut history = Vec::new();
    let mut monitor = Vec::new();
    let mut last_step = config.gamma;
    let mut stop = StopReason::MaxIter;

    for iter in 0..config.max_iter {
        let ev = eval(&theta)?;
        let gn = ev.gradient.norm();
        if gn <= config.grad_tol || gn == 0.0 {
            history.push(IterationRecord {
                iter,
                objective: ev.value,
                grad_norm: gn,
                step: 0.0,
            });
            return Ok(TuningResult {
                theta,
                history,
                stop: StopReason::GradientTolerance,
                monitor,
            });
        }
        let step = match config.step_rule {
            StepRule::Fixed => {
                theta -= &ev.gradient * config.gamma;
                config.gamma * gn
            }
            StepRule::Normalized => {
                theta -= &ev.gradient * (config.gamma / gn);
                config.gamma
            }
            StepRule::Backtracking => {
                let dir = &ev.gradient / gn;
                let mut s = config.gamma.min(2.0 * last_step);
                let mut accepted = None;
                for _ in 0..=config.max_halvings {
                    let cand = &theta - &dir * s;
                    match value(&cand) {
                        Ok(l) if l <= ev.value - config.armijo_c * s * gn => {
                            accepted = Some(cand);
                            break;
                        }
                        Ok(_) => {}
                        Err(e) => log::debug!("candidate at step {s:.3e} rejected: {e}"),
                    }
                    s *= config.shrink;
                }
                match accepted {
                    Some(cand) => {
                        theta = cand;
                        last_step = s;
                        s
                    }
                    None => {
                        stop = StopReason::LineSearchFailed;
                        history.push(IterationRecord {
                            iter,
                            objective: ev.value,
                            grad_norm: gn,
                            step: 0.0,
                        });
                        break;
                    }
                }
            }
        };
        log::debug!("iter {iter}: L = {:.6e}, |grad| = {gn:.3e}, step = {step:.3e}", ev.value);
        if config.monitor_points > 0 {
            monitor.push((iter + 1, solution.nonnegativity(&theta, config.monitor_points)?));
        }
        history.push(IterationRecord {
            iter,
            objective: ev.value,
            grad_norm: gn,
            step,
        });
    }

    if stop == StopReason::MaxIter {
        let ev = eval(&theta)?;
        history.push(IterationRecord {
            iter: config.max_iter,
            objective: ev.value,
            grad_norm: ev.gradient.norm(),
            step: 0.0,
        });
    }
    Ok(TuningResult {
        theta,
        history,
        stop,
        monitor,
    })
}

/// Writes the history as `iter,L,grad_norm,step`.
pub fn write_history_csv<W: std::io::Write>(history: &[IterationRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "iter,L,grad_norm,step")?;
    for r in history {
        writeln!(w, "{},{},{},{}", r.iter, r.objective, r.grad_norm, r.step)?;
    }
    Ok(())
}
