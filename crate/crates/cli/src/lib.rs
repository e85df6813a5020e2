//! Config-driven pipeline behind the `pis` binary.
//!
//! Each stage writes into its own subdirectory of the output root:
//! `nominal/` (value function, residuals, nominal rollout), `shaping/` (the map
//! `M` from `theta` to `h` coefficients), `tuning/` (history, `theta`, `c`,
//! comparison rollouts) and `verify/` (stability reports). `verify` rebuilds
//! the shaped law from the persisted artifacts instead of re-solving.

pub mod artifacts;
pub mod config;
pub mod error;

use std::path::{Path, PathBuf};

use pis_core::nominal::{
    fit_nominal_policy_iteration, hjb_residual, solve_care, CareSolution, PolicyIterationReport, ValueFunction,
};
use pis_core::shaping::{solve_shaping, ShapingProblem, ShapingSolution};
use pis_core::simulate::{rollout, Trajectory};
use pis_core::tuning::{gradient_descent, write_history_csv, TuningResult};
use pis_core::verify::{gain_scaling_check, iss_check, lyapunov_decrease_check, windowed_sine, CheckOutcome};
use pis_core::DVector;

pub use config::RunConfig;
pub use error::{CliError, Result};

use artifacts::{create_dir, labels, write_coefficients, write_text, write_trajectory};

/// Key-value run summary, serialized as TOML with the resolved config appended.
#[derive(Debug, Clone, Default)]
pub struct Summary(toml::Table);

impl Summary {
    pub fn new(stage: &str) -> Self {
        let mut s = Summary::default();
        s.set("stage", stage);
        s
    }

    pub fn set(&mut self, key: &str, value: impl Into<toml::Value>) {
        self.0.insert(key.to_string(), value.into());
    }

    pub fn count(&mut self, key: &str, value: usize) {
        self.set(key, value as i64);
    }

    pub fn floats<'a>(&mut self, key: &str, values: impl IntoIterator<Item = &'a f64>) {
        let arr: Vec<toml::Value> = values.into_iter().map(|v| toml::Value::Float(*v)).collect();
        self.set(key, arr);
    }

    pub fn strings(&mut self, key: &str, values: Vec<String>) {
        self.set(key, values.into_iter().map(toml::Value::String).collect::<Vec<_>>());
    }

    pub fn render(mut self, cfg: &RunConfig) -> String {
        let config = toml::Value::try_from(cfg).expect("config is always serializable");
        self.0.insert("config".into(), config);
        toml::to_string(&self.0).expect("summary is always serializable")
    }
}

pub struct NominalOutcome {
    pub value: ValueFunction,
    pub care: Option<CareSolution>,
    pub policy_iteration: Option<PolicyIterationReport>,
    /// Max and RMS of the HJB residual over the validation points.
    pub validation_max: f64,
    pub validation_rms: f64,
    /// Nominal closed loop from `rollout.x0`.
    pub trajectory: Trajectory,
}

/// Solves the nominal problem without writing anything.
pub fn solve_nominal(cfg: &RunConfig) -> Result<NominalOutcome> {
    let system = cfg.system()?;
    let cost = cfg.state_cost()?;
    let weight = cfg.control_weight()?;
    let domain = cfg.domain()?;

    let (value, care, pi) = if cfg.uses_riccati() {
        let (a, b) = cfg
            .linear_matrices()
            .ok_or_else(|| CliError::field("nominal.method", "riccati needs a linear system"))?;
        let care = solve_care(&a, &b, &cost, &weight, cfg.nominal.care_tol)?;
        (care.value_function(), Some(care), None)
    } else {
        let opts = cfg.policy_iteration_options();
        let report = fit_nominal_policy_iteration(system.as_ref(), &cost, &weight, &cfg.value_basis()?, &domain, &opts)?;
        (report.value.clone(), None, Some(report))
    };

    let m0 = |x: &DVector<f64>| cost.eval(x);
    let validation = domain.halton(cfg.nominal.validation_samples, cfg.nominal.samples);
    let mut max = 0.0f64;
    let mut sq = 0.0;
    for x in &validation {
        let r = hjb_residual(&value, system.as_ref(), &m0, &weight, x)?.abs();
        max = max.max(r);
        sq += r * r;
    }
    let rms = (sq / validation.len().max(1) as f64).sqrt();

    let controller = |x: &DVector<f64>| value.optimal_control(system.as_ref(), &weight, x);
    let trajectory = rollout(system.as_ref(), &controller, &cfg.x0(), cfg.rollout.horizon, cfg.rollout.dt, None)?;
    Ok(NominalOutcome {
        value,
        care,
        policy_iteration: pi,
        validation_max: max,
        validation_rms: rms,
        trajectory,
    })
}

/// `nominal` stage: solves and writes `nominal/`.
pub fn cmd_nominal(cfg: &RunConfig, out: &Path) -> Result<NominalOutcome> {
    let nominal = solve_nominal(cfg)?;
    let dir = out.join("nominal");
    create_dir(&dir)?;
    artifacts::write_value_function(&dir, &nominal.value)?;
    write_trajectory(&dir.join("trajectory.csv"), &nominal.trajectory)?;

    let mut s = Summary::new("nominal");
    s.set("system", cfg.system()?.name().to_string());
    s.set("validation_residual_max", nominal.validation_max);
    s.set("validation_residual_rms", nominal.validation_rms);
    if let Some(care) = &nominal.care {
        let (a, b) = cfg.linear_matrices().expect("riccati implies linear");
        let eig = care.closed_loop(&a, &b).complex_eigenvalues();
        s.set("method", "riccati");
        s.set("care_residual", care.residual);
        s.count("riccati_flow_steps", care.steps);
        s.floats("closed_loop_eigenvalues_re", eig.iter().map(|z| &z.re));
        s.floats("closed_loop_eigenvalues_im", eig.iter().map(|z| &z.im));
        s.floats("gain", care.gain.iter());
    }
    if let Some(pi) = &nominal.policy_iteration {
        s.set("method", "policy_iteration");
        s.set("converged", pi.converged);
        s.count("iterations", pi.iterations);
        s.floats("residual_max_trace", &pi.residual_trace);
        s.floats("residual_rms_trace", &pi.rms_trace);
        s.floats("coefficient_change_trace", &pi.change_trace);
        s.floats("initial_gain", pi.initial_gain.iter());
        s.strings("value_basis", labels(&cfg.value_basis()?));
    }
    rollout_fields(&mut s, "rollout", cfg, &nominal.trajectory);
    write_text(&dir.join("summary.toml"), &s.render(cfg))?;
    Ok(nominal)
}

fn rollout_fields(s: &mut Summary, prefix: &str, cfg: &RunConfig, traj: &Trajectory) {
    let c = cfg.objective.component - 1;
    s.set(&format!("{prefix}_peak"), traj.peak(c));
    s.set(&format!("{prefix}_peak_abs"), traj.peak_abs(c));
    s.set(&format!("{prefix}_final_norm"), traj.final_state().norm());
}

pub fn shaping_problem(cfg: &RunConfig, phi0: ValueFunction) -> Result<ShapingProblem> {
    Ok(ShapingProblem {
        system: cfg.system()?,
        cost: cfg.state_cost()?,
        weight: cfg.control_weight()?,
        phi0,
        basis_m: cfg.m_basis()?,
        basis_h: cfg.h_basis()?,
        domain: cfg.domain()?,
        samples: cfg.shaping.samples,
        ridge: cfg.shaping.ridge,
    })
}

fn write_shaping(cfg: &RunConfig, out: &Path, solution: &ShapingSolution) -> Result<()> {
    let dir = out.join("shaping");
    create_dir(&dir)?;
    let p = solution.problem();
    artifacts::write_map(&dir.join("map.csv"), &p.basis_h, &p.basis_m, solution.map())?;
    let mut s = Summary::new("shaping");
    s.count("m_terms", p.basis_m.len());
    s.count("h_terms", p.basis_h.len());
    s.strings("m_basis", labels(&p.basis_m));
    s.strings("h_basis", labels(&p.basis_h));
    if let Some(scale) = p.basis_m.scale() {
        s.floats("basis_scale", scale);
    }
    s.count("collocation_points", p.samples);
    s.set("ridge", p.ridge);
    s.floats("residual_rms", solution.residual_rms().iter());
    s.set("residual_rms_max", solution.residual_rms().max());
    write_text(&dir.join("summary.toml"), &s.render(cfg))
}

pub struct TuneOutcome {
    pub nominal: NominalOutcome,
    pub solution: ShapingSolution,
    pub result: TuningResult,
    pub initial_conditions: Vec<DVector<f64>>,
    /// Shaped closed loop from `rollout.x0`, with its Lyapunov check.
    pub shaped: CheckOutcome,
}

/// `tune` stage: nominal solve, shaping map, gradient descent and comparison
/// rollouts; writes `nominal/`, `shaping/` and `tuning/`.
pub fn cmd_tune(cfg: &RunConfig, out: &Path) -> Result<TuneOutcome> {
    let nominal = cmd_nominal(cfg, out)?;
    let solution = solve_shaping(&shaping_problem(cfg, nominal.value.clone())?)?;
    write_shaping(cfg, out, &solution)?;

    let penalty = cfg.penalty()?;
    let tcfg = cfg.tuning_config()?;
    let ics = tcfg.initial_conditions.resolve()?;
    let result = gradient_descent(&solution, &penalty, &tcfg, None)?;
    let theta = &result.theta;
    let c = solution.coefficients(theta)?;
    let shaped = lyapunov_decrease_check(
        &solution,
        theta,
        &cfg.x0(),
        cfg.rollout.horizon,
        cfg.rollout.dt,
        cfg.envelope(),
    )?;

    let dir = out.join("tuning");
    create_dir(&dir)?;
    let p = solution.problem();
    artifacts::write_with(&dir.join("history.csv"), |w| write_history_csv(&result.history, w))?;
    write_coefficients(&dir.join("theta.csv"), "theta", &p.basis_m, theta)?;
    write_coefficients(&dir.join("coefficients.csv"), "c", &p.basis_h, &c)?;
    artifacts::write_points(&dir.join("initial_conditions.csv"), &ics)?;
    write_trajectory(&dir.join("nominal_trajectory.csv"), &nominal.trajectory)?;
    if let Some(traj) = &shaped.trajectory {
        write_trajectory(&dir.join("shaped_trajectory.csv"), traj)?;
    }
    write_text(&dir.join("stability.toml"), &shaped.report.to_key_values())?;

    let mut s = Summary::new("tuning");
    s.set("stop_reason", format!("{:?}", result.stop));
    s.count("iterations", result.history.len().saturating_sub(1));
    s.count("initial_conditions", ics.len());
    s.set("objective_initial", result.initial_objective());
    s.set("objective_final", result.final_objective());
    s.set("grad_norm_final", result.history.last().map_or(f64::NAN, |r| r.grad_norm));
    s.floats("theta", theta.iter());
    s.floats("c", c.iter());
    s.strings("m_basis", labels(&p.basis_m));
    s.set("threshold", cfg.objective.threshold);
    rollout_fields(&mut s, "nominal", cfg, &nominal.trajectory);
    match &shaped.trajectory {
        Some(traj) => rollout_fields(&mut s, "shaped", cfg, traj),
        None => s.set("shaped_diverged_at", shaped.report.diverged_at.unwrap_or(f64::NAN)),
    }
    s.set("shaped_lyapunov_passed", shaped.report.passed());
    if let Some((_, last)) = result.monitor.last() {
        s.set("min_mbar", last.min_mbar);
        s.set("min_h", last.min_h);
        s.set("nonnegative", last.ok());
    }
    write_text(&dir.join("summary.toml"), &s.render(cfg))?;

    Ok(TuneOutcome {
        nominal,
        solution,
        result,
        initial_conditions: ics,
        shaped,
    })
}

/// Rebuilds the shaped problem from `nominal/` and `shaping/` under `out`.
pub fn load_solution(cfg: &RunConfig, out: &Path) -> Result<ShapingSolution> {
    let phi0 = artifacts::read_value_function(&out.join("nominal"), cfg.state_dim(), &cfg.value_basis()?)?;
    let problem = shaping_problem(cfg, phi0)?;
    let map_path = out.join("shaping").join("map.csv");
    if !map_path.exists() {
        return Err(CliError::MissingArtifact(map_path));
    }
    let map = artifacts::read_map(&map_path, &problem.basis_h, &problem.basis_m)?;
    Ok(ShapingSolution::from_map(problem, map)?)
}

pub fn default_theta_path(out: &Path) -> PathBuf {
    out.join("tuning").join("theta.csv")
}

/// `verify` stage: Lyapunov, gain-scaling and ISS checks of the persisted
/// `theta`; writes `verify/`.
pub fn cmd_verify(cfg: &RunConfig, out: &Path, theta_path: Option<&Path>) -> Result<Vec<CheckOutcome>> {
    let theta_path = theta_path.map_or_else(|| default_theta_path(out), Path::to_path_buf);
    if !theta_path.exists() {
        return Err(CliError::MissingArtifact(theta_path));
    }
    let solution = load_solution(cfg, out)?;
    let theta = artifacts::read_coefficients(&theta_path, &solution.problem().basis_m)?;

    let v = &cfg.verify;
    let x0 = DVector::from_vec(v.x0.clone().unwrap_or_else(|| cfg.rollout.x0.clone()));
    let dt = v.dt.unwrap_or(cfg.rollout.dt);
    let env = cfg.envelope();
    let mut outcomes = vec![lyapunov_decrease_check(
        &solution,
        &theta,
        &x0,
        v.lyapunov_horizon.unwrap_or(cfg.rollout.horizon),
        dt,
        env,
    )?];
    for &eps in &v.epsilons {
        outcomes.push(gain_scaling_check(&solution, &theta, eps, &x0, v.gain_horizon, dt, env)?);
    }
    let disturbance = windowed_sine(v.disturbance_amplitude, cfg.input_dim(), v.disturbance_until);
    outcomes.push(iss_check(&solution, &theta, &disturbance, &x0, v.iss_horizon, dt, env)?);

    let dir = out.join("verify");
    create_dir(&dir)?;
    let mut s = Summary::new("verify");
    s.set("theta_file", theta_path.display().to_string());
    s.floats("theta", theta.iter());
    for o in &outcomes {
        let label = o.report.check.label();
        write_text(&dir.join(format!("{label}.toml")), &o.report.to_key_values())?;
        if let Some(traj) = &o.trajectory {
            write_trajectory(&dir.join(format!("{label}.csv")), traj)?;
        }
        s.set(&format!("{label}_passed"), o.report.passed());
        if !o.report.passed() {
            log::warn!("check {label} failed its envelope");
        }
    }
    s.set("all_passed", outcomes.iter().all(|o| o.report.passed()));
    write_text(&dir.join("summary.toml"), &s.render(cfg))?;
    Ok(outcomes)
}

/// Loads a config and applies a `--seed` override.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}
