//! Control-affine dynamics `xdot = f(x) + g(x) u` with hand-derived Jacobians.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Result};
use crate::linalg;

pub trait ControlAffine: Send + Sync {
    fn name(&self) -> &str;

    /// State dimension.
    fn n(&self) -> usize;

    /// Input dimension.
    fn p(&self) -> usize;

    fn f(&self, x: &DVector<f64>) -> DVector<f64>;

    /// Input matrix, `n x p`.
    fn g(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// Jacobian of `f`, `n x n`.
    fn df_dx(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// Jacobians of the columns of `g`: entry `j` is `d g[:, j] / dx`, `n x n`.
    fn dg_dx(&self, x: &DVector<f64>) -> Vec<DMatrix<f64>>;
}

/// `f(x) + g(x) u` with dimension checks.
pub fn evaluate(system: &dyn ControlAffine, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("state", x.len(), system.n())?;
    check_dim("input", u.len(), system.p())?;
    Ok(system.f(x) + system.g(x) * u)
}

#[derive(Debug, Clone)]
pub struct Linearization {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub controllability_rank: usize,
    /// Rank of the observability matrix of `(A, Q^{1/2})`, when `Q` was given.
    pub observability_rank: Option<usize>,
}

impl Linearization {
    pub fn is_controllable(&self) -> bool {
        self.controllability_rank == self.a.nrows()
    }

    pub fn is_observable(&self) -> bool {
        self.observability_rank.is_none_or(|r| r == self.a.nrows())
    }
}

/// Linearization at the origin plus rank diagnostics. Rank deficiency is
/// reported through `log::warn!`, not as an error.
pub fn linearize(system: &dyn ControlAffine, q: Option<&DMatrix<f64>>) -> Linearization {
    let zero = DVector::zeros(system.n());
    let a = system.df_dx(&zero);
    let b = system.g(&zero);
    let controllability_rank = linalg::rank(&linalg::controllability_matrix(&a, &b));
    let observability_rank = q.map(|q| {
        let c = linalg::sym_sqrt(q);
        linalg::rank(&linalg::controllability_matrix(&a.transpose(), &c.transpose()))
    });
    let lin = Linearization {
        a,
        b,
        controllability_rank,
        observability_rank,
    };
    if !lin.is_controllable() {
        log::warn!(
            "{}: linearization is not controllable (rank {} < {})",
            system.name(),
            controllability_rank,
            system.n()
        );
    }
    if !lin.is_observable() {
        log::warn!(
            "{}: (A, Q^1/2) is not observable (rank {:?} < {})",
            system.name(),
            observability_rank,
            system.n()
        );
    }
    lin
}

/// Linear time-invariant system `xdot = A x + B u`.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    name: String,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(name: impl Into<String>, a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        check_dim("A columns", a.ncols(), a.nrows())?;
        check_dim("B rows", b.nrows(), a.nrows())?;
        Ok(LinearSystem {
            name: name.into(),
            a,
            b,
        })
    }

    /// Third-order example: a lightly damped oscillator driving a first-order lag.
    ///
    /// ```text
    /// A = [ 0       1          0 ]     B = [0]
    ///     [ -wn^2  -2 zeta wn  1 ]         [1]
    ///     [ 0       1         -1 ]         [0]
    /// ```
    pub fn third_order(omega_n: f64, zeta: f64) -> Self {
        let a = DMatrix::from_row_slice(
            3,
            3,
            &[
                0.0,
                1.0,
                0.0,
                -omega_n * omega_n,
                -2.0 * zeta * omega_n,
                1.0,
                0.0,
                1.0,
                -1.0,
            ],
        );
        let b = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0]);
        LinearSystem {
            name: "lti3".into(),
            a,
            b,
        }
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
}

impl ControlAffine for LinearSystem {
    fn name(&self) -> &str {
        &self.name
    }

    fn n(&self) -> usize {
        self.a.nrows()
    }

    fn p(&self) -> usize {
        self.b.ncols()
    }

    fn f(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x
    }

    fn g(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.b.clone()
    }

    fn df_dx(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }

    fn dg_dx(&self, _x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        vec![DMatrix::zeros(self.n(), self.n()); self.p()]
    }
}

/// Cart-pole with state `[p, xi, v, omega]` (cart position, pole angle, cart
/// velocity, pole rate) and horizontal force input:
///
/// ```text
/// vdot     = (u + m_p sin(xi) (l w^2 - g cos(xi))) / D
/// omegadot = (u cos(xi) + m_p l w^2 cos(xi) sin(xi) - (m_c + m_p) g sin(xi)) / (l D)
/// D        = m_c + m_p sin^2(xi)
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartPole {
    pub m_c: f64,
    pub m_p: f64,
    pub l: f64,
    pub grav: f64,
}

impl Default for CartPole {
    fn default() -> Self {
        CartPole {
            m_c: 1.0,
            m_p: 0.1,
            l: 0.5,
            grav: 9.81,
        }
    }
}

impl CartPole {
    pub fn new(m_c: f64, m_p: f64, l: f64, grav: f64) -> Result<Self> {
        if !(m_c > 0.0 && m_p >= 0.0 && l > 0.0 && grav.is_finite()) {
            return Err(crate::Error::InvalidArgument(format!(
                "cart-pole parameters out of range: m_c={m_c}, m_p={m_p}, l={l}, grav={grav}"
            )));
        }
        Ok(CartPole { m_c, m_p, l, grav })
    }

    fn denom(&self, s: f64) -> f64 {
        self.m_c + self.m_p * s * s
    }
}

impl ControlAffine for CartPole {
    fn name(&self) -> &str {
        "cartpole"
    }

    fn n(&self) -> usize {
        4
    }

    fn p(&self) -> usize {
        1
    }

    fn f(&self, x: &DVector<f64>) -> DVector<f64> {
        let (xi, v, w) = (x[1], x[2], x[3]);
        let (s, c) = xi.sin_cos();
        let d = self.denom(s);
        let vdot = self.m_p * s * (self.l * w * w - self.grav * c) / d;
        let wdot = (self.m_p * self.l * w * w * c * s - (self.m_c + self.m_p) * self.grav * s)
            / (self.l * d);
        DVector::from_vec(vec![v, w, vdot, wdot])
    }

    fn g(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (s, c) = x[1].sin_cos();
        let d = self.denom(s);
        DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 1.0 / d, c / (self.l * d)])
    }

    fn df_dx(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (xi, w) = (x[1], x[3]);
        let (s, c) = xi.sin_cos();
        let (mp, mc, l, g) = (self.m_p, self.m_c, self.l, self.grav);
        let d = self.denom(s);
        let dd = 2.0 * mp * s * c;

        let n3 = mp * (s * l * w * w - g * s * c);
        let dn3 = mp * (c * l * w * w - g * (c * c - s * s));
        let n4 = mp * l * w * w * c * s - (mc + mp) * g * s;
        let dn4 = mp * l * w * w * (c * c - s * s) - (mc + mp) * g * c;

        let mut j = DMatrix::zeros(4, 4);
        j[(0, 2)] = 1.0;
        j[(1, 3)] = 1.0;
        j[(2, 1)] = (dn3 * d - n3 * dd) / (d * d);
        j[(2, 3)] = 2.0 * mp * s * l * w / d;
        j[(3, 1)] = (dn4 * d - n4 * dd) / (l * d * d);
        j[(3, 3)] = 2.0 * mp * w * c * s / d;
        j
    }

    fn dg_dx(&self, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let (s, c) = x[1].sin_cos();
        let d = self.denom(s);
        let dd = 2.0 * self.m_p * s * c;
        let mut j = DMatrix::zeros(4, 4);
        j[(2, 1)] = -dd / (d * d);
        j[(3, 1)] = (-s * d - c * dd) / (self.l * d * d);
        vec![j]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cartpole_rest_is_equilibrium() {
        let cp = CartPole::default();
        let r = evaluate(&cp, &DVector::zeros(4), &DVector::zeros(1)).unwrap();
        assert_eq!(r, DVector::zeros(4));
    }

    #[test]
    fn cartpole_unit_push_at_rest() {
        let cp = CartPole::default();
        let r = evaluate(&cp, &DVector::zeros(4), &DVector::from_element(1, 1.0)).unwrap();
        let expect = [0.0, 0.0, 1.0 / cp.m_c, 1.0 / (cp.l * cp.m_c)];
        for i in 0..4 {
            assert!((r[i] - expect[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn lti3_rate_from_displaced_state() {
        let sys = LinearSystem::third_order(2.0, 0.1);
        let r = evaluate(&sys, &DVector::from_vec(vec![-5.0, 0.0, 0.0]), &DVector::zeros(1)).unwrap();
        assert_eq!(r.as_slice(), &[0.0, 20.0, 0.0]);
    }

    #[test]
    fn evaluate_checks_dimensions() {
        let sys = LinearSystem::third_order(2.0, 0.1);
        assert!(evaluate(&sys, &DVector::zeros(2), &DVector::zeros(1)).is_err());
        assert!(evaluate(&sys, &DVector::zeros(3), &DVector::zeros(2)).is_err());
    }

    #[test]
    fn linearize_lti_is_identity_map() {
        let sys = LinearSystem::third_order(2.0, 0.1);
        let lin = linearize(&sys, Some(&DMatrix::identity(3, 3)));
        assert_eq!(&lin.a, sys.a());
        assert_eq!(&lin.b, sys.b());
        assert!(lin.is_controllable());
        assert!(lin.is_observable());
    }

    #[test]
    fn linearize_cartpole_at_origin() {
        let cp = CartPole::default();
        let lin = linearize(&cp, Some(&DMatrix::identity(4, 4)));
        assert!((lin.b[(2, 0)] - 1.0 / cp.m_c).abs() < 1e-15);
        assert!((lin.b[(3, 0)] - 1.0 / (cp.l * cp.m_c)).abs() < 1e-15);
        let expect = -(cp.m_c + cp.m_p) * cp.grav / (cp.l * cp.m_c);
        assert!((lin.a[(3, 1)] - expect).abs() < 1e-12);
        assert!((lin.a[(2, 1)] + cp.m_p * cp.grav / cp.m_c).abs() < 1e-12);
        assert!(lin.is_controllable());
    }

    #[test]
    fn uncontrollable_pair_detected() {
        let sys = LinearSystem::new(
            "decoupled",
            DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -2.0]),
            DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
        )
        .unwrap();
        let lin = linearize(&sys, None);
        assert_eq!(lin.controllability_rank, 1);
        assert!(!lin.is_controllable());
    }
}
