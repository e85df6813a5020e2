//! Nominal optimal control: the minimum performance index `phi0` and the law
//! `u0 = -1/2 R^-1 g(x)' grad(phi0)`.
//!
//! Linear-quadratic problems go through the algebraic Riccati equation.
//! Nonlinear ones use successive approximation (policy iteration) over an even
//! polynomial basis, started from the LQR law of the linearization.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dynamics::{linearize, ControlAffine};
use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::polybasis::EvenPolyBasis;
use crate::sampling::BoxDomain;
use crate::simulate::rk4;

/// Polynomial `sum_i c_i psi_i(x)` on an even basis.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyFunction {
    pub basis: EvenPolyBasis,
    pub coeffs: DVector<f64>,
}

impl PolyFunction {
    pub fn new(basis: EvenPolyBasis, coeffs: DVector<f64>) -> Result<Self> {
        check_dim("polynomial coefficients", coeffs.len(), basis.len())?;
        Ok(PolyFunction { basis, coeffs })
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.basis.values(x).expect("dimension checked by caller").dot(&self.coeffs)
    }
}

/// State cost `m0(x) = x'Qx + q(x)`.
#[derive(Debug, Clone)]
pub struct StateCost {
    q: DMatrix<f64>,
    extra: Option<PolyFunction>,
}

impl StateCost {
    pub fn new(q: DMatrix<f64>, extra: Option<PolyFunction>) -> Result<Self> {
        if !linalg::is_symmetric(&q, 1e-12) {
            return Err(Error::InvalidArgument("Q must be symmetric".into()));
        }
        if linalg::min_eigenvalue(&q) < -1e-12 * q.amax().max(1.0) {
            return Err(Error::InvalidArgument("Q must be non-negative definite".into()));
        }
        if let Some(e) = &extra {
            check_dim("q(x) basis", e.basis.n_vars(), q.nrows())?;
        }
        Ok(StateCost { q, extra })
    }

    pub fn quadratic(q: DMatrix<f64>) -> Result<Self> {
        Self::new(q, None)
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn extra(&self) -> Option<&PolyFunction> {
        self.extra.as_ref()
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        let quad = x.dot(&(&self.q * x));
        quad + self.extra.as_ref().map_or(0.0, |e| e.value(x))
    }

    /// Smallest value of `q(x)` over `count` Halton points; warns when negative.
    pub fn check_extra_nonnegative(&self, domain: &BoxDomain, count: usize) -> f64 {
        let Some(extra) = &self.extra else {
            return 0.0;
        };
        let min = domain
            .halton(count, 0)
            .iter()
            .map(|x| extra.value(x))
            .fold(f64::INFINITY, f64::min);
        if min < 0.0 {
            log::warn!("higher-order state cost q(x) reaches {min:.3e} < 0 on the domain");
        }
        min
    }
}

/// Control weight `R` with its inverse cached.
#[derive(Debug, Clone)]
pub struct ControlWeight {
    r: DMatrix<f64>,
    r_inv: DMatrix<f64>,
}

impl ControlWeight {
    pub fn new(r: DMatrix<f64>) -> Result<Self> {
        if !linalg::is_symmetric(&r, 1e-12) {
            return Err(Error::InvalidArgument("R must be symmetric".into()));
        }
        if linalg::min_eigenvalue(&r) <= 0.0 {
            return Err(Error::InvalidArgument("R must be positive definite".into()));
        }
        let r_inv = r
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidArgument("R is not invertible".into()))?;
        Ok(ControlWeight { r, r_inv })
    }

    pub fn scalar(r: f64) -> Result<Self> {
        Self::new(DMatrix::from_element(1, 1, r))
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn r_inv(&self) -> &DMatrix<f64> {
        &self.r_inv
    }

    pub fn dim(&self) -> usize {
        self.r.nrows()
    }

    /// `|u|_R^2 = u' R u`.
    pub fn norm_sq(&self, u: &DVector<f64>) -> f64 {
        u.dot(&(&self.r * u))
    }
}

/// Value function: quadratic `x'Px` or a polynomial over an even basis.
#[derive(Debug, Clone, PartialEq)]
pub enum ValueFunction {
    Quadratic { p: DMatrix<f64> },
    Polynomial(PolyFunction),
}

impl ValueFunction {
    pub fn dim(&self) -> usize {
        match self {
            ValueFunction::Quadratic { p } => p.nrows(),
            ValueFunction::Polynomial(poly) => poly.basis.n_vars(),
        }
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match self {
            ValueFunction::Quadratic { p } => x.dot(&(p * x)),
            ValueFunction::Polynomial(poly) => poly.value(x),
        }
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            ValueFunction::Quadratic { p } => (p * x) * 2.0,
            ValueFunction::Polynomial(poly) => {
                poly.basis.gradients(x).expect("dimension checked by caller") * &poly.coeffs
            }
        }
    }

    pub fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match self {
            ValueFunction::Quadratic { p } => p * 2.0,
            ValueFunction::Polynomial(poly) => poly
                .basis
                .hessian(x, &poly.coeffs)
                .expect("dimension checked by caller"),
        }
    }

    /// `-1/2 R^-1 g(x)' grad(phi)(x)`.
    pub fn optimal_control(
        &self,
        system: &dyn ControlAffine,
        weight: &ControlWeight,
        x: &DVector<f64>,
    ) -> DVector<f64> {
        -(weight.r_inv() * system.g(x).transpose() * self.gradient(x)) * 0.5
    }
}

/// Coefficients on `basis` representing the quadratic form `x'Px`.
pub fn quadratic_coefficients(p: &DMatrix<f64>, basis: &EvenPolyBasis) -> Result<DVector<f64>> {
    check_dim("quadratic form", p.nrows(), basis.n_vars())?;
    let n = p.nrows();
    let mut c = DVector::zeros(basis.len());
    for i in 0..n {
        for j in i..n {
            let mut e = vec![0u32; n];
            e[i] += 1;
            e[j] += 1;
            let k = basis.position(&e).ok_or_else(|| {
                Error::InvalidArgument("basis lacks quadratic terms".into())
            })?;
            c[k] = if i == j { p[(i, i)] } else { p[(i, j)] + p[(j, i)] };
        }
    }
    Ok(c)
}

/// `A'P + PA + Q - P B R^-1 B' P`.
pub fn care_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r_inv: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> DMatrix<f64> {
    a.transpose() * p + p * a + q - p * b * r_inv * b.transpose() * p
}

#[derive(Debug, Clone)]
pub struct CareSolution {
    pub p: DMatrix<f64>,
    /// LQR gain `K = R^-1 B' P`, so `u0 = -K x`.
    pub gain: DMatrix<f64>,
    /// Frobenius norm of the algebraic residual at `p`.
    pub residual: f64,
    pub steps: usize,
}

impl CareSolution {
    pub fn value_function(&self) -> ValueFunction {
        ValueFunction::Quadratic { p: self.p.clone() }
    }

    pub fn closed_loop(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        a - b * &self.gain
    }
}

const DRE_STEP: f64 = 1e-3;
const DRE_RATE_TOL: f64 = 1e-12;
const DRE_MAX_STEPS: usize = 5_000_000;

/// Stabilizing solution of the algebraic Riccati equation, obtained by
/// integrating `Pdot = A'P + PA + Q - P B R^-1 B' P` from `P(0) = 0` to steady
/// state and certifying the result by the algebraic residual.
pub fn solve_care(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    cost: &StateCost,
    weight: &ControlWeight,
    tol: f64,
) -> Result<CareSolution> {
    let n = a.nrows();
    check_dim("A columns", a.ncols(), n)?;
    check_dim("B rows", b.nrows(), n)?;
    check_dim("Q", cost.q().nrows(), n)?;
    check_dim("R", weight.dim(), b.ncols())?;
    if cost.extra().is_some() {
        log::warn!("Riccati solve ignores the higher-order state cost q(x)");
    }
    let q = cost.q();
    let r_inv = weight.r_inv();
    let n2 = n * n;
    let rate = |_t: f64, v: &DVector<f64>| {
        let p = DMatrix::from_column_slice(n, n, v.as_slice());
        let d = care_residual(a, b, q, r_inv, &p);
        DVector::from_column_slice(d.as_slice())
    };

    let mut v = DVector::zeros(n2);
    let mut history = Vec::new();
    let mut steps = 0;
    loop {
        let d = rate(0.0, &v);
        let dn = d.norm();
        let scale = v.norm().max(1.0);
        if steps % 10_000 == 0 {
            history.push(dn);
        }
        if dn < DRE_RATE_TOL * scale {
            break;
        }
        if steps >= DRE_MAX_STEPS || !dn.is_finite() {
            history.push(dn);
            let tail = history.split_off(history.len().saturating_sub(8));
            return Err(Error::SolverFailure {
                reason: format!("Riccati flow did not settle within {steps} steps"),
                residuals: tail,
            });
        }
        v = rk4(rate, 0.0, &v, DRE_STEP);
        let mut p = DMatrix::from_column_slice(n, n, v.as_slice());
        p = (&p + p.transpose()) * 0.5;
        v = DVector::from_column_slice(p.as_slice());
        steps += 1;
    }

    let p = DMatrix::from_column_slice(n, n, v.as_slice());
    let residual = care_residual(a, b, q, r_inv, &p).norm();
    if residual >= tol {
        history.push(residual);
        return Err(Error::SolverFailure {
            reason: format!("Riccati residual {residual:.3e} above tolerance {tol:.1e}"),
            residuals: history,
        });
    }
    let gain = r_inv * b.transpose() * &p;
    Ok(CareSolution {
        p,
        gain,
        residual,
        steps,
    })
}

/// `grad(phi)' f - 1/4 grad(phi)' g R^-1 g' grad(phi) + m(x)`.
pub fn hjb_residual(
    phi: &ValueFunction,
    system: &dyn ControlAffine,
    m: &dyn Fn(&DVector<f64>) -> f64,
    weight: &ControlWeight,
    x: &DVector<f64>,
) -> Result<f64> {
    check_dim("state", x.len(), system.n())?;
    check_dim("value function", phi.dim(), system.n())?;
    let grad = phi.gradient(x);
    let gt_grad = system.g(x).transpose() * &grad;
    let quad = gt_grad.dot(&(weight.r_inv() * &gt_grad));
    Ok(grad.dot(&system.f(x)) - 0.25 * quad + m(x))
}

#[derive(Debug, Clone)]
pub struct PolicyIterationOptions {
    /// Collocation sample count.
    pub samples: usize,
    /// Validation points, drawn further along the same Halton sequence.
    pub validation_samples: usize,
    /// Relative coefficient-change tolerance.
    pub tol: f64,
    pub max_iter: usize,
    pub ridge: f64,
}

impl Default for PolicyIterationOptions {
    fn default() -> Self {
        PolicyIterationOptions {
            samples: 2000,
            validation_samples: 1000,
            tol: 1e-8,
            max_iter: 50,
            ridge: 1e-10,
        }
    }
}

/// Relative growth of the max validation residual that counts as an increase
/// for the divergence guard; smaller wiggles are plateau noise.
pub const PI_INCREASE_SLACK: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct PolicyIterationReport {
    pub value: ValueFunction,
    /// LQR gain of the linearization, the iteration-0 policy.
    pub initial_gain: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Max |HJB residual| over the validation points after each iteration.
    pub residual_trace: Vec<f64>,
    /// Root-mean-square HJB residual over the same points.
    pub rms_trace: Vec<f64>,
    /// Relative coefficient change after each iteration.
    pub change_trace: Vec<f64>,
}

/// Policy iteration on a polynomial value function.
///
/// Each sweep evaluates the current policy `u_k` by least squares on
/// `grad(phi)'(f + g u_k) = -(m0 + |u_k|_R^2)` at the collocation points, then
/// improves it to `u_{k+1} = -1/2 R^-1 g' grad(phi_{k+1})`.
pub fn fit_nominal_policy_iteration(
    system: &dyn ControlAffine,
    cost: &StateCost,
    weight: &ControlWeight,
    basis: &EvenPolyBasis,
    domain: &BoxDomain,
    opts: &PolicyIterationOptions,
) -> Result<PolicyIterationReport> {
    let n = system.n();
    check_dim("basis variables", basis.n_vars(), n)?;
    check_dim("domain", domain.dim(), n)?;
    check_dim("R", weight.dim(), system.p())?;
    if opts.samples < basis.len() {
        return Err(Error::Underdetermined {
            rows: opts.samples,
            cols: basis.len(),
        });
    }

    let lin = linearize(system, Some(cost.q()));
    let lqr = solve_care(&lin.a, &lin.b, cost, weight, 1e-8)?;
    let mut coeffs = quadratic_coefficients(&lqr.p, basis)?;

    let points = domain.halton(opts.samples, 0);
    let validation = domain.halton(opts.validation_samples, opts.samples);
    let m0 = |x: &DVector<f64>| cost.eval(x);

    let mut residual_trace = Vec::new();
    let mut rms_trace = Vec::new();
    let mut change_trace = Vec::new();
    let mut increases = 0;
    let mut converged = false;
    let mut iterations = 0;

    for k in 0..opts.max_iter {
        let policy = |x: &DVector<f64>| -> DVector<f64> {
            if k == 0 {
                -(&lqr.gain * x)
            } else {
                let grad = basis.gradients(x).expect("dimension checked") * &coeffs;
                -(weight.r_inv() * system.g(x).transpose() * grad) * 0.5
            }
        };
        let rows: Vec<(DVector<f64>, f64)> = points
            .par_iter()
            .map(|x| {
                let u = policy(x);
                let rate = system.f(x) + system.g(x) * &u;
                let grads = basis.gradients(x).expect("dimension checked");
                let row = grads.transpose() * rate;
                (row, -(m0(x) + weight.norm_sq(&u)))
            })
            .collect();
        let mut a = DMatrix::zeros(rows.len(), basis.len());
        let mut b = DMatrix::zeros(rows.len(), 1);
        for (i, (row, rhs)) in rows.iter().enumerate() {
            a.row_mut(i).copy_from(&row.transpose());
            b[(i, 0)] = *rhs;
        }
        let next = linalg::ridge_least_squares(&a, &b, opts.ridge)?.column(0).into_owned();
        let change = (&next - &coeffs).norm() / next.norm().max(1.0);
        coeffs = next;
        iterations = k + 1;

        let phi = ValueFunction::Polynomial(PolyFunction::new(basis.clone(), coeffs.clone())?);
        let residuals = validation
            .par_iter()
            .map(|x| hjb_residual(&phi, system, &m0, weight, x).map(f64::abs))
            .collect::<Result<Vec<_>>>()?;
        let worst = residuals.iter().copied().fold(0.0, f64::max);
        let rms = (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt();

        if let Some(&prev) = residual_trace.last() {
            if worst > prev * (1.0 + PI_INCREASE_SLACK) {
                increases += 1;
            } else {
                increases = 0;
            }
        }
        residual_trace.push(worst);
        rms_trace.push(rms);
        change_trace.push(change);
        log::debug!("policy iteration {iterations}: max HJB residual {worst:.3e}, change {change:.3e}");

        if increases >= 3 {
            return Err(Error::NonConvergence {
                reason: "validation HJB residual grew for 3 consecutive iterations".into(),
                trace: residual_trace,
            });
        }
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "policy iteration stopped at max_iter = {} without meeting tol = {:.1e}",
            opts.max_iter,
            opts.tol
        );
    }

    Ok(PolicyIterationReport {
        value: ValueFunction::Polynomial(PolyFunction::new(basis.clone(), coeffs)?),
        initial_gain: lqr.gain,
        iterations,
        converged,
        residual_trace,
        rms_trace,
        change_trace,
    })
}
