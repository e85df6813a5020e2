//! Experiment configuration, read from TOML.
//!
//! Every optional field has a default, and [`RunConfig::resolve`] fills in the
//! fields whose default depends on other fields, so the serialized resolved
//! config written into each run summary is complete.

use std::path::Path;
use std::sync::Arc;

use pis_core::dynamics::{CartPole, ControlAffine, LinearSystem};
use pis_core::nominal::{ControlWeight, PolicyIterationOptions, PolyFunction, StateCost};
use pis_core::objective::{Aggregation, OvershootPenalty};
use pis_core::polybasis::{enumerate_even_monomials, EvenPolyBasis};
use pis_core::sampling::BoxDomain;
use pis_core::tuning::{InitialConditions, RolloutGrid, StepRule, TuningConfig};
use pis_core::verify::Envelope;
use pis_core::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of the initial-condition sampler; `--seed` overrides it.
    #[serde(default)]
    pub seed: u64,
    /// Output root, used when `--out` is not given.
    #[serde(default = "default_output")]
    pub output: String,
    pub system: SystemConfig,
    pub cost: CostConfig,
    pub domain: DomainConfig,
    #[serde(default)]
    pub nominal: NominalConfig,
    #[serde(default)]
    pub basis: BasisConfig,
    #[serde(default)]
    pub shaping: ShapingConfig,
    pub objective: ObjectiveConfig,
    pub rollout: RolloutConfig,
    pub tuning: TuningSection,
    #[serde(default)]
    pub verify: VerifyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase", deny_unknown_fields)]
pub enum SystemConfig {
    /// Third-order chain `x1' = x2, x2' = x3, x3' = -wn^2 x2 - 2 zeta wn x3 + u`.
    Lti3 {
        #[serde(default = "default_omega_n")]
        omega_n: f64,
        #[serde(default = "default_zeta")]
        zeta: f64,
    },
    Cartpole {
        #[serde(default = "default_m_c")]
        m_c: f64,
        #[serde(default = "default_m_p")]
        m_p: f64,
        #[serde(default = "default_length")]
        l: f64,
        #[serde(default = "default_grav")]
        grav: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    /// State weight, given as rows.
    pub q: Vec<Vec<f64>>,
    /// Input weight, given as rows.
    pub r: Vec<Vec<f64>>,
    /// Optional higher-order state cost on an even monomial basis.
    pub q_extra: Option<PolyTerm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolyTerm {
    pub degree: u32,
    pub coeffs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    /// The box `|x_i| <= half_widths[i]` used for collocation and validation.
    pub half_widths: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NominalMethod {
    /// Riccati for linear systems without `q_extra`, policy iteration otherwise.
    #[default]
    Auto,
    Riccati,
    PolicyIteration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NominalConfig {
    #[serde(default)]
    pub method: NominalMethod,
    #[serde(default = "default_care_tol")]
    pub care_tol: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_validation")]
    pub validation_samples: usize,
    #[serde(default = "default_pi_tol")]
    pub tol: f64,
    #[serde(default = "default_pi_iter")]
    pub max_iter: usize,
}

impl Default for NominalConfig {
    fn default() -> Self {
        NominalConfig {
            method: NominalMethod::Auto,
            care_tol: default_care_tol(),
            samples: default_samples(),
            validation_samples: default_validation(),
            tol: default_pi_tol(),
            max_iter: default_pi_iter(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisScale {
    /// Raw monomials.
    #[default]
    None,
    /// Monomials in `x_i / half_widths[i]`.
    Domain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    /// Maximum degree of the `mbar` basis.
    #[serde(default = "default_degree")]
    pub m_degree: u32,
    /// Maximum degree of the `h` basis.
    #[serde(default = "default_degree")]
    pub h_degree: u32,
    /// Maximum degree of the policy-iteration value function.
    #[serde(default = "default_degree")]
    pub value_degree: u32,
    /// Scaling of the `mbar` and `h` bases.
    #[serde(default)]
    pub scale: BasisScale,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig {
            m_degree: default_degree(),
            h_degree: default_degree(),
            value_degree: default_degree(),
            scale: BasisScale::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapingConfig {
    /// Collocation point count `K`.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        ShapingConfig {
            samples: default_samples(),
            ridge: default_ridge(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// Penalized state, 1-based like the `x1..xn` CSV columns.
    pub component: usize,
    pub threshold: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    /// Test initial condition for the comparison rollouts.
    pub x0: Vec<f64>,
    pub dt: f64,
    pub horizon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepRuleConfig {
    Fixed,
    Normalized,
    #[default]
    Backtracking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationConfig {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub half_widths: Vec<f64>,
    pub count: usize,
    #[serde(default)]
    pub antithetic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningSection {
    pub gamma: f64,
    pub max_iter: usize,
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    #[serde(default)]
    pub step: StepRuleConfig,
    #[serde(default)]
    pub aggregation: AggregationConfig,
    #[serde(default = "default_armijo")]
    pub armijo_c: f64,
    #[serde(default = "default_shrink")]
    pub shrink: f64,
    #[serde(default = "default_halvings")]
    pub max_halvings: usize,
    #[serde(default = "default_monitor")]
    pub monitor_points: usize,
    /// Explicit training initial conditions; defaults to `[rollout.x0]` when
    /// no sampler is given.
    pub initial_conditions: Option<Vec<Vec<f64>>>,
    pub sampler: Option<SamplerConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    /// Initial condition of the checks; defaults to `rollout.x0`.
    pub x0: Option<Vec<f64>>,
    /// Step of the check rollouts; defaults to `rollout.dt`.
    pub dt: Option<f64>,
    /// Horizon of the Lyapunov check; defaults to `rollout.horizon`.
    pub lyapunov_horizon: Option<f64>,
    #[serde(default = "default_gain_horizon")]
    pub gain_horizon: f64,
    #[serde(default = "default_amplitude")]
    pub disturbance_amplitude: f64,
    #[serde(default = "default_until")]
    pub disturbance_until: f64,
    #[serde(default = "default_iss_horizon")]
    pub iss_horizon: f64,
    /// Largest tolerated single-step increase of `phi_p`; defaults to `dt / 1e4`.
    pub lyapunov_tol: Option<f64>,
    #[serde(default = "default_terminal_tol")]
    pub terminal_tol: f64,
    #[serde(default = "default_sup_bound")]
    pub sup_bound: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            epsilons: default_epsilons(),
            x0: None,
            dt: None,
            lyapunov_horizon: None,
            gain_horizon: default_gain_horizon(),
            disturbance_amplitude: default_amplitude(),
            disturbance_until: default_until(),
            iss_horizon: default_iss_horizon(),
            lyapunov_tol: None,
            terminal_tol: default_terminal_tol(),
            sup_bound: default_sup_bound(),
        }
    }
}

fn default_output() -> String {
    "out".into()
}
fn default_omega_n() -> f64 {
    2.0
}
fn default_zeta() -> f64 {
    0.1
}
fn default_m_c() -> f64 {
    CartPole::default().m_c
}
fn default_m_p() -> f64 {
    CartPole::default().m_p
}
fn default_length() -> f64 {
    CartPole::default().l
}
fn default_grav() -> f64 {
    CartPole::default().grav
}
fn default_care_tol() -> f64 {
    1e-8
}
fn default_samples() -> usize {
    2000
}
fn default_validation() -> usize {
    1000
}
fn default_pi_tol() -> f64 {
    1e-8
}
fn default_pi_iter() -> usize {
    50
}
fn default_degree() -> u32 {
    4
}
fn default_ridge() -> f64 {
    pis_core::shaping::DEFAULT_RIDGE
}
fn default_beta() -> f64 {
    10.0
}
fn default_grad_tol() -> f64 {
    1e-10
}
fn default_armijo() -> f64 {
    1e-4
}
fn default_shrink() -> f64 {
    0.5
}
fn default_halvings() -> usize {
    40
}
fn default_monitor() -> usize {
    1000
}
fn default_epsilons() -> Vec<f64> {
    vec![0.05, 0.5, 2.0]
}
fn default_gain_horizon() -> f64 {
    30.0
}
fn default_amplitude() -> f64 {
    0.5
}
fn default_until() -> f64 {
    25.0
}
fn default_iss_horizon() -> f64 {
    50.0
}
fn default_terminal_tol() -> f64 {
    0.05
}
fn default_sup_bound() -> f64 {
    100.0
}

impl RunConfig {
    /// Reads, parses and validates a config file, returning it resolved.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CliError::MissingArtifact(path.to_path_buf())
            } else {
                CliError::Io {
                    path: path.to_path_buf(),
                    source: e,
                }
            }
        })?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config { message, .. } => CliError::Config {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config {
            path: "<string>".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg.resolve())
    }

    /// Fills fields whose defaults derive from other fields.
    pub fn resolve(mut self) -> Self {
        let v = &mut self.verify;
        v.x0.get_or_insert_with(|| self.rollout.x0.clone());
        let dt = *v.dt.get_or_insert(self.rollout.dt);
        v.lyapunov_horizon.get_or_insert(self.rollout.horizon);
        v.lyapunov_tol.get_or_insert(Envelope::for_step(dt).lyapunov_tol);
        if self.tuning.initial_conditions.is_none() && self.tuning.sampler.is_none() {
            self.tuning.initial_conditions = Some(vec![self.rollout.x0.clone()]);
        }
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn state_dim(&self) -> usize {
        match self.system {
            SystemConfig::Lti3 { .. } => 3,
            SystemConfig::Cartpole { .. } => 4,
        }
    }

    pub fn input_dim(&self) -> usize {
        1
    }

    fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        let p = self.input_dim();
        check_matrix("cost.q", &self.cost.q, n)?;
        check_matrix("cost.r", &self.cost.r, p)?;
        self.state_cost()?;
        self.control_weight()?;
        if let Some(extra) = &self.cost.q_extra {
            let len = pis_core::polybasis::even_basis_size(n, extra.degree);
            if extra.coeffs.len() != len {
                return Err(CliError::field(
                    "cost.q_extra.coeffs",
                    format!("expected {len} coefficients for degree {}, got {}", extra.degree, extra.coeffs.len()),
                ));
            }
        }
        check_widths("domain.half_widths", &self.domain.half_widths, n)?;
        check_len("rollout.x0", &self.rollout.x0, n)?;
        check_positive("rollout.dt", self.rollout.dt)?;
        check_positive("rollout.horizon", self.rollout.horizon)?;
        if self.objective.component == 0 || self.objective.component > n {
            return Err(CliError::field(
                "objective.component",
                format!("must lie in 1..={n}, got {}", self.objective.component),
            ));
        }
        check_positive("objective.beta", self.objective.beta)?;
        check_positive("tuning.gamma", self.tuning.gamma)?;
        if self.tuning.max_iter == 0 {
            return Err(CliError::field("tuning.max_iter", "must be at least 1"));
        }
        match (&self.tuning.initial_conditions, &self.tuning.sampler) {
            (Some(_), Some(_)) => {
                return Err(CliError::field(
                    "tuning.sampler",
                    "give either tuning.initial_conditions or tuning.sampler, not both",
                ))
            }
            (Some(ics), None) => {
                if ics.is_empty() {
                    return Err(CliError::field("tuning.initial_conditions", "must not be empty"));
                }
                for (i, x) in ics.iter().enumerate() {
                    check_len(&format!("tuning.initial_conditions[{i}]"), x, n)?;
                }
            }
            (None, Some(s)) => {
                check_widths("tuning.sampler.half_widths", &s.half_widths, n)?;
                if s.count == 0 {
                    return Err(CliError::field("tuning.sampler.count", "must be at least 1"));
                }
            }
            (None, None) => {}
        }
        let v = &self.verify;
        if v.epsilons.iter().any(|e| !(*e > 0.0)) {
            return Err(CliError::field("verify.epsilons", "every epsilon must be positive"));
        }
        if let Some(x0) = &v.x0 {
            check_len("verify.x0", x0, n)?;
        }
        if let Some(dt) = v.dt {
            check_positive("verify.dt", dt)?;
        }
        check_positive("verify.gain_horizon", v.gain_horizon)?;
        check_positive("verify.iss_horizon", v.iss_horizon)?;
        Ok(())
    }

    pub fn system(&self) -> Result<Arc<dyn ControlAffine>> {
        Ok(match self.system {
            SystemConfig::Lti3 { omega_n, zeta } => Arc::new(LinearSystem::third_order(omega_n, zeta)),
            SystemConfig::Cartpole { m_c, m_p, l, grav } => Arc::new(CartPole::new(m_c, m_p, l, grav)?),
        })
    }

    /// `(A, B)` when the system is linear.
    pub fn linear_matrices(&self) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        match self.system {
            SystemConfig::Lti3 { omega_n, zeta } => {
                let sys = LinearSystem::third_order(omega_n, zeta);
                Some((sys.a().clone(), sys.b().clone()))
            }
            SystemConfig::Cartpole { .. } => None,
        }
    }

    pub fn state_cost(&self) -> Result<StateCost> {
        let q = rows_to_matrix(&self.cost.q);
        let extra = match &self.cost.q_extra {
            Some(t) => {
                let basis = enumerate_even_monomials(self.state_dim(), t.degree)?;
                Some(PolyFunction::new(basis, DVector::from_vec(t.coeffs.clone()))?)
            }
            None => None,
        };
        StateCost::new(q, extra).map_err(|e| CliError::field("cost.q", e.to_string()))
    }

    pub fn control_weight(&self) -> Result<ControlWeight> {
        ControlWeight::new(rows_to_matrix(&self.cost.r)).map_err(|e| CliError::field("cost.r", e.to_string()))
    }

    pub fn domain(&self) -> Result<BoxDomain> {
        Ok(BoxDomain::symmetric(self.domain.half_widths.clone())?)
    }

    pub fn uses_riccati(&self) -> bool {
        match self.nominal.method {
            NominalMethod::Riccati => true,
            NominalMethod::PolicyIteration => false,
            NominalMethod::Auto => self.linear_matrices().is_some() && self.cost.q_extra.is_none(),
        }
    }

    pub fn policy_iteration_options(&self) -> PolicyIterationOptions {
        PolicyIterationOptions {
            samples: self.nominal.samples,
            validation_samples: self.nominal.validation_samples,
            tol: self.nominal.tol,
            max_iter: self.nominal.max_iter,
            ridge: self.shaping.ridge,
        }
    }

    pub fn value_basis(&self) -> Result<EvenPolyBasis> {
        Ok(enumerate_even_monomials(self.state_dim(), self.basis.value_degree)?)
    }

    fn scaled(&self, basis: EvenPolyBasis) -> Result<EvenPolyBasis> {
        Ok(match self.basis.scale {
            BasisScale::None => basis,
            BasisScale::Domain => basis.with_scale(self.domain.half_widths.clone())?,
        })
    }

    pub fn m_basis(&self) -> Result<EvenPolyBasis> {
        self.scaled(enumerate_even_monomials(self.state_dim(), self.basis.m_degree)?)
    }

    pub fn h_basis(&self) -> Result<EvenPolyBasis> {
        self.scaled(enumerate_even_monomials(self.state_dim(), self.basis.h_degree)?)
    }

    pub fn penalty(&self) -> Result<OvershootPenalty> {
        let o = &self.objective;
        Ok(OvershootPenalty::new(o.component - 1, o.threshold, o.beta)?)
    }

    pub fn x0(&self) -> DVector<f64> {
        DVector::from_vec(self.rollout.x0.clone())
    }

    pub fn grid(&self) -> RolloutGrid {
        RolloutGrid {
            horizon: self.rollout.horizon,
            dt: self.rollout.dt,
        }
    }

    pub fn initial_conditions(&self) -> Result<InitialConditions> {
        let t = &self.tuning;
        if let Some(s) = &t.sampler {
            return Ok(InitialConditions::UniformBox {
                domain: BoxDomain::symmetric(s.half_widths.clone())?,
                count: s.count,
                seed: self.seed,
                antithetic: s.antithetic,
            });
        }
        let ics = t.initial_conditions.clone().unwrap_or_else(|| vec![self.rollout.x0.clone()]);
        Ok(InitialConditions::List(ics.into_iter().map(DVector::from_vec).collect()))
    }

    pub fn tuning_config(&self) -> Result<TuningConfig> {
        let t = &self.tuning;
        let mut cfg = TuningConfig::new(t.gamma, t.max_iter, self.initial_conditions()?, self.grid());
        cfg.grad_tol = t.grad_tol;
        cfg.step_rule = match t.step {
            StepRuleConfig::Fixed => StepRule::Fixed,
            StepRuleConfig::Normalized => StepRule::Normalized,
            StepRuleConfig::Backtracking => StepRule::Backtracking,
        };
        cfg.aggregation = match t.aggregation {
            AggregationConfig::Sum => Aggregation::Sum,
            AggregationConfig::Mean => Aggregation::Mean,
        };
        cfg.armijo_c = t.armijo_c;
        cfg.shrink = t.shrink;
        cfg.max_halvings = t.max_halvings;
        cfg.monitor_points = t.monitor_points;
        Ok(cfg)
    }

    /// Envelope of the verification checks, after [`RunConfig::resolve`].
    pub fn envelope(&self) -> Envelope {
        let v = &self.verify;
        let dt = v.dt.unwrap_or(self.rollout.dt);
        Envelope {
            lyapunov_tol: v.lyapunov_tol.unwrap_or(Envelope::for_step(dt).lyapunov_tol),
            terminal_tol: v.terminal_tol,
            sup_bound: v.sup_bound,
        }
    }
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(n, m, |i, j| rows[i][j])
}

fn check_matrix(field: &str, rows: &[Vec<f64>], n: usize) -> Result<()> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(CliError::field(field, format!("expected a {n}x{n} matrix given as {n} rows")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CliError::field(field, "entries must be finite"));
    }
    Ok(())
}

fn check_len(field: &str, v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(CliError::field(field, format!("expected {n} entries, got {}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(CliError::field(field, "entries must be finite"));
    }
    Ok(())
}

fn check_widths(field: &str, v: &[f64], n: usize) -> Result<()> {
    check_len(field, v, n)?;
    if v.iter().any(|w| !(*w > 0.0)) {
        return Err(CliError::field(field, "half-widths must be positive"));
    }
    Ok(())
}

fn check_positive(field: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(CliError::field(field, format!("must be positive, got {v}")));
    }
    Ok(())
}
