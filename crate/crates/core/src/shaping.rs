//! Closed-form shaping of a solved optimal control problem.
//!
//! With `mbar(x, theta) = psi_m(x)' theta` and `h(x, theta) = psi_h(x)' c`, the
//! defining condition `grad(h)' F_cl = -mbar` along the nominal closed-loop
//! field `F_cl = f - 1/2 g R^-1 g' grad(phi0)` is linear in both `c` and
//! `theta`. Collocation at `K` points therefore yields a fixed matrix `M` with
//! `c = M theta`, computed once; every later `theta` costs a matrix-vector
//! product.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dynamics::ControlAffine;
use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::nominal::{hjb_residual, ControlWeight, StateCost, ValueFunction};
use crate::polybasis::EvenPolyBasis;
use crate::sampling::BoxDomain;

pub const DEFAULT_RIDGE: f64 = 1e-10;

/// `f(x) - 1/2 g(x) R^-1 g(x)' grad(phi0)(x)`.
pub fn nominal_closed_loop_field(
    phi0: &ValueFunction,
    system: &dyn ControlAffine,
    weight: &ControlWeight,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dim("state", x.len(), system.n())?;
    check_dim("value function", phi0.dim(), system.n())?;
    let g = system.g(x);
    Ok(system.f(x) - &g * (weight.r_inv() * g.transpose() * phi0.gradient(x)) * 0.5)
}

#[derive(Clone)]
pub struct ShapingProblem {
    pub system: Arc<dyn ControlAffine>,
    /// Nominal state cost `m0`, only used for residual diagnostics.
    pub cost: StateCost,
    pub weight: ControlWeight,
    pub phi0: ValueFunction,
    /// Basis of `mbar`; `theta` has one entry per term.
    pub basis_m: EvenPolyBasis,
    /// Basis of `h`.
    pub basis_h: EvenPolyBasis,
    pub domain: BoxDomain,
    /// Collocation sample count `K`.
    pub samples: usize,
    pub ridge: f64,
}

impl std::fmt::Debug for ShapingProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShapingProblem")
            .field("system", &self.system.name())
            .field("basis_m", &self.basis_m.len())
            .field("basis_h", &self.basis_h.len())
            .field("domain", &self.domain)
            .field("samples", &self.samples)
            .finish()
    }
}

impl ShapingProblem {
    pub fn q_dim(&self) -> usize {
        self.basis_m.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.system.n();
        check_dim("mbar basis", self.basis_m.n_vars(), n)?;
        check_dim("h basis", self.basis_h.n_vars(), n)?;
        check_dim("domain", self.domain.dim(), n)?;
        check_dim("phi0", self.phi0.dim(), n)?;
        check_dim("R", self.weight.dim(), self.system.p())?;
        if self.samples < self.basis_h.len() {
            return Err(Error::Underdetermined {
                rows: self.samples,
                cols: self.basis_h.len(),
            });
        }
        Ok(())
    }

    pub fn collocation_points(&self) -> Vec<DVector<f64>> {
        self.domain.halton(self.samples, 0)
    }
}

/// Collocation rows at explicit points: `A[k, i] = grad(psi_h,i)(x_k)' F_cl(x_k)`
/// and `B[k, j] = psi_m,j(x_k)`.
pub fn assemble_at(
    problem: &ShapingProblem,
    points: &[DVector<f64>],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let rows: Vec<(DVector<f64>, DVector<f64>)> = points
        .par_iter()
        .map(|x| {
            let field = nominal_closed_loop_field(&problem.phi0, problem.system.as_ref(), &problem.weight, x)?;
            let grads = problem.basis_h.gradients(x)?;
            Ok((grads.transpose() * field, problem.basis_m.values(x)?))
        })
        .collect::<Result<_>>()?;
    let mut a = DMatrix::zeros(points.len(), problem.basis_h.len());
    let mut b = DMatrix::zeros(points.len(), problem.basis_m.len());
    for (k, (ra, rb)) in rows.iter().enumerate() {
        a.row_mut(k).copy_from(&ra.transpose());
        b.row_mut(k).copy_from(&rb.transpose());
    }
    Ok((a, b))
}

/// Collocation matrices over the problem's Halton sample set.
pub fn assemble_collocation(problem: &ShapingProblem) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    problem.validate()?;
    assemble_at(problem, &problem.collocation_points())
}

/// Solves for the map `M` with `A M ~ -B` in ridge-regularized least squares.
pub fn solve_shaping(problem: &ShapingProblem) -> Result<ShapingSolution> {
    let (a, b) = assemble_collocation(problem)?;
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("collocation matrices contain non-finite entries".into()));
    }
    let (rank, null) = linalg::null_directions(&a);
    if rank < problem.basis_h.len() {
        let terms = problem.basis_h.descriptor();
        let null_terms = null
            .iter()
            .map(|v| {
                let (i, _) = v.iamax_full();
                terms[i].clone()
            })
            .collect();
        return Err(Error::RankDeficient {
            rank,
            expected: problem.basis_h.len(),
            null_terms,
        });
    }
    let map = -linalg::ridge_least_squares(&a, &b, problem.ridge)?;
    let resid = &a * &map + &b;
    let k = a.nrows() as f64;
    let residual_rms = DVector::from_iterator(
        resid.ncols(),
        resid.column_iter().map(|c| (c.norm_squared() / k).sqrt()),
    );
    Ok(ShapingSolution {
        problem: problem.clone(),
        map,
        residual_rms,
    })
}

/// Decomposition of the effective added running cost `v = mbar + quadratic`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AddedCost {
    pub total: f64,
    pub mbar: f64,
    /// `1/4 |R^-1 g' grad h|_R^2`, equal to `|u_p - u_0|_R^2`.
    pub quadratic: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonnegativityReport {
    pub min_mbar: f64,
    pub min_h: f64,
    pub points: usize,
}

impl NonnegativityReport {
    pub fn ok(&self) -> bool {
        self.min_mbar >= 0.0 && self.min_h >= 0.0
    }
}

/// The shaping map `c = M theta` with its problem data.
#[derive(Debug, Clone)]
pub struct ShapingSolution {
    problem: ShapingProblem,
    map: DMatrix<f64>,
    residual_rms: DVector<f64>,
}

impl ShapingSolution {
    /// Rebuilds a solution from a previously computed map.
    pub fn from_map(problem: ShapingProblem, map: DMatrix<f64>) -> Result<Self> {
        problem.validate()?;
        check_dim("map rows", map.nrows(), problem.basis_h.len())?;
        check_dim("map columns", map.ncols(), problem.basis_m.len())?;
        let (a, b) = assemble_collocation(&problem)?;
        let resid = &a * &map + &b;
        let k = a.nrows() as f64;
        let residual_rms = DVector::from_iterator(
            resid.ncols(),
            resid.column_iter().map(|c| (c.norm_squared() / k).sqrt()),
        );
        Ok(ShapingSolution {
            problem,
            map,
            residual_rms,
        })
    }

    pub fn problem(&self) -> &ShapingProblem {
        &self.problem
    }

    pub fn system(&self) -> &dyn ControlAffine {
        self.problem.system.as_ref()
    }

    /// The `N x q` map `M`.
    pub fn map(&self) -> &DMatrix<f64> {
        &self.map
    }

    /// Collocation residual RMS for each unit `theta` direction.
    pub fn residual_rms(&self) -> &DVector<f64> {
        &self.residual_rms
    }

    pub fn q_dim(&self) -> usize {
        self.map.ncols()
    }

    pub fn coefficients(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("theta", theta.len(), self.q_dim())?;
        Ok(&self.map * theta)
    }

    /// Binds a parameter vector, precomputing `c = M theta`.
    pub fn law(&self, theta: &DVector<f64>) -> Result<ShapedLaw<'_>> {
        let coeffs = self.coefficients(theta)?;
        Ok(ShapedLaw {
            solution: self,
            theta: theta.clone(),
            coeffs,
        })
    }

    pub fn h_value_grad(&self, theta: &DVector<f64>, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        self.law(theta)?.h_value_grad(x)
    }

    pub fn shaped_control(&self, theta: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.law(theta)?.control(x)
    }

    pub fn effective_added_cost(&self, theta: &DVector<f64>, x: &DVector<f64>) -> Result<AddedCost> {
        self.law(theta)?.added_cost(x)
    }

    pub fn identity_residual(&self, theta: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        self.law(theta)?.identity_residual(x)
    }

    /// `du/dtheta = -1/2 R^-1 g(x)' grad(psi_h)(x) M`, `p x q`; independent of theta.
    pub fn control_sensitivity(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim("state", x.len(), self.system().n())?;
        let grads = self.problem.basis_h.gradients(x)?;
        let g = self.system().g(x);
        Ok(-(self.problem.weight.r_inv() * g.transpose() * grads * &self.map) * 0.5)
    }

    /// Minimum of `mbar` and `h` over `count` Halton points of the domain,
    /// taken past the collocation set. Negative minima are logged.
    pub fn nonnegativity(&self, theta: &DVector<f64>, count: usize) -> Result<NonnegativityReport> {
        let law = self.law(theta)?;
        let points = self.problem.domain.halton(count, self.problem.samples);
        let (min_mbar, min_h) = points
            .par_iter()
            .map(|x| -> Result<(f64, f64)> { Ok((law.mbar(x)?, law.h(x)?)) })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold((f64::INFINITY, f64::INFINITY), |(a, b), (m, h)| (a.min(m), b.min(h)));
        let report = NonnegativityReport {
            min_mbar,
            min_h,
            points: count,
        };
        if !report.ok() {
            log::warn!(
                "shaping terms are not non-negative on the domain: min mbar = {min_mbar:.3e}, min h = {min_h:.3e}"
            );
        }
        Ok(report)
    }
}

/// A shaping solution evaluated at one parameter vector.
#[derive(Debug, Clone)]
pub struct ShapedLaw<'a> {
    solution: &'a ShapingSolution,
    theta: DVector<f64>,
    coeffs: DVector<f64>,
}

impl ShapedLaw<'_> {
    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    /// `c = M theta`.
    pub fn coeffs(&self) -> &DVector<f64> {
        &self.coeffs
    }

    fn problem(&self) -> &ShapingProblem {
        &self.solution.problem
    }

    pub fn mbar(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.problem().basis_m.values(x)?.dot(&self.theta))
    }

    pub fn h(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.problem().basis_h.values(x)?.dot(&self.coeffs))
    }

    pub fn h_value_grad(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (v, g) = self.problem().basis_h.eval(x)?;
        Ok((v.dot(&self.coeffs), g * &self.coeffs))
    }

    pub fn grad_h(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.problem().basis_h.gradients(x)? * &self.coeffs)
    }

    /// `phi_p = phi0 + h`.
    pub fn value(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.problem().phi0.value(x) + self.h(x)?)
    }

    pub fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.problem().phi0.gradient(x) + self.grad_h(x)?)
    }

    pub fn hessian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.problem().phi0.hessian(x) + self.problem().basis_h.hessian(x, &self.coeffs)?)
    }

    pub fn value_function(&self) -> ShapedValue<'_> {
        ShapedValue { law: self }
    }

    /// `u_p = -1/2 R^-1 g(x)' (grad(phi0) + grad(h))`.
    pub fn control(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("state", x.len(), self.solution.system().n())?;
        let g = self.solution.system().g(x);
        Ok(-(self.problem().weight.r_inv() * g.transpose() * self.gradient(x)?) * 0.5)
    }

    /// Infallible controller for rollouts; panics on a dimension mismatch,
    /// which the rollout has already ruled out.
    pub fn controller(&self) -> impl Fn(&DVector<f64>) -> DVector<f64> + Sync + '_ {
        move |x| self.control(x).expect("state dimension checked by rollout")
    }

    pub fn nominal_control(&self, x: &DVector<f64>) -> DVector<f64> {
        self.problem()
            .phi0
            .optimal_control(self.solution.system(), &self.problem().weight, x)
    }

    /// `du/dx`, `p x n`: `-1/2 R^-1 [ (dg_j/dx)' grad(phi_p) + H g_j ]_j`.
    pub fn control_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let sys = self.solution.system();
        let grad = self.gradient(x)?;
        let hess = self.hessian(x)?;
        let g = sys.g(x);
        let dg = sys.dg_dx(x);
        let (n, p) = (sys.n(), sys.p());
        let mut d = DMatrix::zeros(p, n);
        for j in 0..p {
            let row = dg[j].transpose() * &grad + &hess * g.column(j);
            d.row_mut(j).copy_from(&row.transpose());
        }
        Ok(-(self.problem().weight.r_inv() * d) * 0.5)
    }

    pub fn added_cost(&self, x: &DVector<f64>) -> Result<AddedCost> {
        let mbar = self.mbar(x)?;
        let g = self.solution.system().g(x);
        let w = &self.problem().weight;
        let z = w.r_inv() * g.transpose() * self.grad_h(x)?;
        let quadratic = 0.25 * w.norm_sq(&z);
        Ok(AddedCost {
            total: mbar + quadratic,
            mbar,
            quadratic,
        })
    }

    /// HJB residual of `phi_p` under the shaped running cost `m0 + v`.
    pub fn shaped_hjb_residual(&self, x: &DVector<f64>) -> Result<f64> {
        let p = self.problem();
        let m = |y: &DVector<f64>| {
            p.cost.eval(y) + self.added_cost(y).map(|c| c.total).unwrap_or(f64::NAN)
        };
        let phi_p = self.value_function();
        hjb_residual_shaped(&phi_p, p, &m, x)
    }

    /// Shaped HJB residual minus nominal HJB residual minus the defining-PDE
    /// residual `grad(h)' F_cl + mbar`. Zero by algebra for any `h`.
    pub fn identity_residual(&self, x: &DVector<f64>) -> Result<f64> {
        let p = self.problem();
        let shaped = self.shaped_hjb_residual(x)?;
        let m0 = |y: &DVector<f64>| p.cost.eval(y);
        let nominal = hjb_residual(&p.phi0, p.system.as_ref(), &m0, &p.weight, x)?;
        let field = nominal_closed_loop_field(&p.phi0, p.system.as_ref(), &p.weight, x)?;
        let pde = self.grad_h(x)?.dot(&field) + self.mbar(x)?;
        Ok(shaped - nominal - pde)
    }
}

/// `phi_p` viewed as a value function.
pub struct ShapedValue<'a> {
    law: &'a ShapedLaw<'a>,
}

impl ShapedValue<'_> {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.law.value(x).expect("dimension checked")
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.law.gradient(x).expect("dimension checked")
    }
}

fn hjb_residual_shaped(
    phi: &ShapedValue<'_>,
    problem: &ShapingProblem,
    m: &dyn Fn(&DVector<f64>) -> f64,
    x: &DVector<f64>,
) -> Result<f64> {
    let sys = problem.system.as_ref();
    check_dim("state", x.len(), sys.n())?;
    let grad = phi.gradient(x);
    let gt_grad = sys.g(x).transpose() * &grad;
    let quad = gt_grad.dot(&(problem.weight.r_inv() * &gt_grad));
    Ok(grad.dot(&sys.f(x)) - 0.25 * quad + m(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::LinearSystem;
    use crate::nominal::solve_care;
    use crate::polybasis::enumerate_even_monomials;

    /// xdot = u with R = Q = 1: phi0 = x^2, u0 = -x, closed loop xdot = -x.
    fn toy(samples: usize) -> ShapingProblem {
        let sys = LinearSystem::new("toy", DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let cost = StateCost::quadratic(DMatrix::from_element(1, 1, 1.0)).unwrap();
        let weight = ControlWeight::scalar(1.0).unwrap();
        let care = solve_care(sys.a(), sys.b(), &cost, &weight, 1e-12).unwrap();
        let basis = enumerate_even_monomials(1, 2).unwrap();
        ShapingProblem {
            system: Arc::new(sys),
            cost,
            weight,
            phi0: care.value_function(),
            basis_m: basis.clone(),
            basis_h: basis,
            domain: BoxDomain::symmetric(vec![1.0]).unwrap(),
            samples,
            ridge: DEFAULT_RIDGE,
        }
    }

    #[test]
    fn toy_closed_loop_field() {
        let p = toy(10);
        let x = DVector::from_element(1, 0.7);
        let f = nominal_closed_loop_field(&p.phi0, p.system.as_ref(), &p.weight, &x).unwrap();
        assert!((f[0] + 0.7).abs() < 1e-12);
    }

    #[test]
    fn toy_assembly_entry() {
        let mut p = toy(1);
        p.domain = BoxDomain::symmetric(vec![3.0]).unwrap();
        let x = DVector::from_element(1, 1.3);
        let (a, b) = assemble_at(&p, std::slice::from_ref(&x)).unwrap();
        // 2x * (-x) with the closed loop xdot = -x (up to the Riccati tolerance)
        assert!((a[(0, 0)] + 2.0 * 1.3 * 1.3).abs() < 1e-10);
        assert!((b[(0, 0)] - 1.69).abs() < 1e-15);
        let (a0, b0) = assemble_at(&p, &[DVector::zeros(1)]).unwrap();
        assert_eq!((a0[(0, 0)], b0[(0, 0)]), (0.0, 0.0));
    }

    #[test]
    fn toy_map_is_one_half() {
        // The ridge biases the map by roughly ridge / sum(a_k^2), visible only
        // for very few points.
        for (k, tol) in [(2, 1e-9), (7, 1e-10), (200, 1e-12)] {
            let sol = solve_shaping(&toy(k)).unwrap();
            assert!((sol.map()[(0, 0)] - 0.5).abs() < tol, "K={k}: {}", sol.map()[(0, 0)]);
        }
    }

    #[test]
    fn collocation_shapes() {
        let sys = LinearSystem::third_order(2.0, 0.1);
        let cost = StateCost::quadratic(DMatrix::identity(3, 3)).unwrap();
        let weight = ControlWeight::scalar(1.0).unwrap();
        let care = solve_care(sys.a(), sys.b(), &cost, &weight, 1e-8).unwrap();
        let problem = ShapingProblem {
            system: Arc::new(sys),
            cost,
            weight,
            phi0: care.value_function(),
            basis_m: enumerate_even_monomials(3, 2).unwrap(),
            basis_h: enumerate_even_monomials(3, 4).unwrap(),
            domain: BoxDomain::symmetric(vec![1.0, 1.0, 1.0]).unwrap(),
            samples: 100,
            ridge: DEFAULT_RIDGE,
        };
        let (a, b) = assemble_collocation(&problem).unwrap();
        assert_eq!(a.shape(), (100, 21));
        assert_eq!(b.shape(), (100, 6));
    }

    #[test]
    fn underdetermined_rejected() {
        let mut p = toy(1);
        p.basis_h = enumerate_even_monomials(1, 6).unwrap();
        assert!(matches!(solve_shaping(&p), Err(Error::Underdetermined { .. })));
    }

    #[test]
    fn rank_deficiency_names_terms() {
        // all samples on the x2 = 0 plane leave x2-containing terms unconstrained
        let sys = LinearSystem::new(
            "diag",
            DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]),
            DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
        )
        .unwrap();
        let cost = StateCost::quadratic(DMatrix::zeros(2, 2)).unwrap();
        let weight = ControlWeight::scalar(1.0).unwrap();
        let care = solve_care(sys.a(), sys.b(), &cost, &weight, 1e-10).unwrap();
        let basis = enumerate_even_monomials(2, 2).unwrap();
        let problem = ShapingProblem {
            system: Arc::new(sys),
            cost,
            weight,
            phi0: care.value_function(),
            basis_m: basis.clone(),
            basis_h: basis,
            domain: BoxDomain::new(vec![-1.0, 0.0], vec![1.0, 1e-300]).unwrap(),
            samples: 50,
            ridge: DEFAULT_RIDGE,
        };
        match solve_shaping(&problem) {
            Err(Error::RankDeficient { rank, expected, null_terms }) => {
                assert_eq!(expected, 3);
                assert!(rank < 3);
                assert!(null_terms.iter().all(|t| t[1] > 0));
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn zero_theta_is_nominal() {
        let sol = solve_shaping(&toy(50)).unwrap();
        let theta = DVector::zeros(1);
        let x = DVector::from_element(1, 0.4);
        let law = sol.law(&theta).unwrap();
        assert_eq!(law.h_value_grad(&x).unwrap(), (0.0, DVector::zeros(1)));
        assert_eq!(law.control(&x).unwrap(), law.nominal_control(&x));
        assert_eq!(law.added_cost(&x).unwrap().total, 0.0);
        assert_eq!(law.identity_residual(&x).unwrap(), 0.0);
    }

    #[test]
    fn toy_shaped_control_matches_hand_formula() {
        let sol = solve_shaping(&toy(50)).unwrap();
        let theta = DVector::from_element(1, 2.0);
        let x = DVector::from_element(1, -0.6);
        let law = sol.law(&theta).unwrap();
        let c1 = law.coeffs()[0];
        let expect = law.nominal_control(&x)[0] - c1 * x[0];
        assert!((law.control(&x).unwrap()[0] - expect).abs() < 1e-14);
        assert_eq!(law.control(&DVector::zeros(1)).unwrap()[0], 0.0);
    }
}
