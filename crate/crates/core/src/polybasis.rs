//! Even-degree multivariate monomial bases.
//!
//! Terms are ordered graded-lexicographically: by total degree ascending, and
//! within one degree by exponent tuple in descending lexicographic order, so
//! `x1^2` precedes `x1 x2` precedes `x2^2`. The order fixes the layout of every
//! coefficient vector built on a basis.
//!
//! A basis may carry a per-coordinate scale `s`, in which case term `alpha`
//! is `prod_j (x_j / s_j)^alpha_j`. This spans the same functions but keeps
//! coefficients comparable across coordinates with very different ranges.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

/// Exponent tuple of a single monomial.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MultiIndex(Vec<u32>);

impl MultiIndex {
    pub fn new(exponents: Vec<u32>) -> Self {
        MultiIndex(exponents)
    }

    pub fn exponents(&self) -> &[u32] {
        &self.0
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{e}")?;
        }
        write!(f, ")")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvenPolyBasis {
    n_vars: usize,
    max_degree: u32,
    terms: Vec<MultiIndex>,
    scale: Option<Vec<f64>>,
}

/// Number of monomials of exact degree `d` in `n` variables, `C(d+n-1, n-1)`.
pub fn homogeneous_count(n: usize, d: u32) -> usize {
    let k = n.saturating_sub(1) as u128;
    let top = d as u128 + k;
    let mut num: u128 = 1;
    for i in 0..k {
        num = num * (top - i) / (i + 1);
    }
    num as usize
}

/// Closed-form size of the even basis with degrees `2, 4, ..., max_degree`.
pub fn even_basis_size(n: usize, max_degree: u32) -> usize {
    (2..=max_degree)
        .step_by(2)
        .map(|d| homogeneous_count(n, d))
        .sum()
}

/// Pushes every exponent tuple of length `n` summing to `remaining`, in
/// descending lexicographic order.
fn push_compositions(prefix: &mut Vec<u32>, n: usize, remaining: u32, out: &mut Vec<MultiIndex>) {
    if prefix.len() + 1 == n {
        prefix.push(remaining);
        out.push(MultiIndex(prefix.clone()));
        prefix.pop();
        return;
    }
    for e in (0..=remaining).rev() {
        prefix.push(e);
        push_compositions(prefix, n, remaining - e, out);
        prefix.pop();
    }
}

/// All monomials of even degree in `[2, max_degree]` over `n_vars` variables.
pub fn enumerate_even_monomials(n_vars: usize, max_degree: u32) -> Result<EvenPolyBasis> {
    if n_vars == 0 {
        return Err(Error::InvalidArgument("basis needs at least one variable".into()));
    }
    if max_degree < 2 || !max_degree.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "max_degree must be even and >= 2, got {max_degree}"
        )));
    }
    let mut terms = Vec::with_capacity(even_basis_size(n_vars, max_degree));
    let mut prefix = Vec::with_capacity(n_vars);
    for d in (2..=max_degree).step_by(2) {
        push_compositions(&mut prefix, n_vars, d, &mut terms);
    }
    Ok(EvenPolyBasis {
        n_vars,
        max_degree,
        terms,
        scale: None,
    })
}

/// Per-coordinate power table: `table[j][e] = x_j^e`.
struct Powers {
    table: Vec<Vec<f64>>,
}

impl Powers {
    fn new(x: &[f64], max_degree: u32) -> Self {
        let table = x
            .iter()
            .map(|&xi| {
                let mut row = Vec::with_capacity(max_degree as usize + 1);
                let mut acc = 1.0;
                for _ in 0..=max_degree {
                    row.push(acc);
                    acc *= xi;
                }
                row
            })
            .collect();
        Powers { table }
    }

    #[inline]
    fn get(&self, j: usize, e: u32) -> f64 {
        self.table[j][e as usize]
    }

    /// Product of `x_j^{alpha_j - drop_j}` over all coordinates.
    fn monomial(&self, alpha: &[u32], drop_a: Option<usize>, drop_b: Option<usize>) -> f64 {
        let mut prod = 1.0;
        for (j, &e) in alpha.iter().enumerate() {
            let mut e = e as i64;
            if drop_a == Some(j) {
                e -= 1;
            }
            if drop_b == Some(j) {
                e -= 1;
            }
            if e < 0 {
                return 0.0;
            }
            prod *= self.get(j, e as u32);
        }
        prod
    }
}

impl EvenPolyBasis {
    /// Same terms, evaluated on `x_j / scale_j`.
    pub fn with_scale(mut self, scale: Vec<f64>) -> Result<Self> {
        check_dim("basis scale", scale.len(), self.n_vars)?;
        if scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "basis scales must be positive and finite, got {scale:?}"
            )));
        }
        self.scale = Some(scale);
        Ok(self)
    }

    pub fn scale(&self) -> Option<&[f64]> {
        self.scale.as_deref()
    }

    #[inline]
    fn inv_scale(&self, j: usize) -> f64 {
        self.scale.as_ref().map_or(1.0, |s| 1.0 / s[j])
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn max_degree(&self) -> u32 {
        self.max_degree
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[MultiIndex] {
        &self.terms
    }

    /// Exponent tuples, in basis order.
    pub fn descriptor(&self) -> Vec<Vec<u32>> {
        self.terms.iter().map(|t| t.0.clone()).collect()
    }

    /// Index of the term with the given exponents, if present.
    pub fn position(&self, exponents: &[u32]) -> Option<usize> {
        self.terms.iter().position(|t| t.0 == exponents)
    }

    fn powers(&self, x: &DVector<f64>) -> Result<Powers> {
        check_dim("basis evaluation point", x.len(), self.n_vars)?;
        match &self.scale {
            None => Ok(Powers::new(x.as_slice(), self.max_degree)),
            Some(s) => {
                let y: Vec<f64> = x.iter().zip(s).map(|(xi, si)| xi / si).collect();
                Ok(Powers::new(&y, self.max_degree))
            }
        }
    }

    pub fn values(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let pw = self.powers(x)?;
        Ok(DVector::from_iterator(
            self.len(),
            self.terms.iter().map(|t| pw.monomial(&t.0, None, None)),
        ))
    }

    /// Gradient matrix, `n_vars x len`; column `i` is the gradient of term `i`.
    pub fn gradients(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let pw = self.powers(x)?;
        Ok(self.gradients_with(&pw))
    }

    fn gradients_with(&self, pw: &Powers) -> DMatrix<f64> {
        let n = self.n_vars;
        let mut grad = DMatrix::zeros(n, self.len());
        for (i, t) in self.terms.iter().enumerate() {
            for j in 0..n {
                let e = t.0[j];
                if e > 0 {
                    grad[(j, i)] = e as f64 * pw.monomial(&t.0, Some(j), None) * self.inv_scale(j);
                }
            }
        }
        grad
    }

    /// Values and gradients in one pass over the power table.
    pub fn eval(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let pw = self.powers(x)?;
        let values = DVector::from_iterator(
            self.len(),
            self.terms.iter().map(|t| pw.monomial(&t.0, None, None)),
        );
        Ok((values, self.gradients_with(&pw)))
    }

    /// Hessian of `sum_i coeffs[i] * psi_i` at `x`.
    pub fn hessian(&self, x: &DVector<f64>, coeffs: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim("basis coefficients", coeffs.len(), self.len())?;
        let pw = self.powers(x)?;
        let n = self.n_vars;
        let mut hess = DMatrix::zeros(n, n);
        for (t, &c) in self.terms.iter().zip(coeffs.iter()) {
            if c == 0.0 {
                continue;
            }
            for a in 0..n {
                let ea = t.0[a];
                if ea == 0 {
                    continue;
                }
                for b in a..n {
                    let factor = if a == b {
                        (ea * ea.saturating_sub(1)) as f64
                    } else {
                        (ea * t.0[b]) as f64
                    };
                    if factor == 0.0 {
                        continue;
                    }
                    let v = c * factor * pw.monomial(&t.0, Some(a), Some(b)) * self.inv_scale(a) * self.inv_scale(b);
                    hess[(a, b)] += v;
                    if a != b {
                        hess[(b, a)] += v;
                    }
                }
            }
        }
        Ok(hess)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_match_closed_form() {
        assert_eq!(enumerate_even_monomials(3, 4).unwrap().len(), 21);
        assert_eq!(enumerate_even_monomials(4, 4).unwrap().len(), 45);
        assert_eq!(enumerate_even_monomials(2, 4).unwrap().len(), 8);
        for n in 1..=5 {
            for d in [2, 4, 6] {
                let b = enumerate_even_monomials(n, d).unwrap();
                assert_eq!(b.len(), even_basis_size(n, d), "n={n} d={d}");
            }
        }
    }

    #[test]
    fn rejects_odd_or_zero_degree() {
        assert!(matches!(
            enumerate_even_monomials(3, 3),
            Err(Error::InvalidArgument(_))
        ));
        assert!(enumerate_even_monomials(3, 0).is_err());
        assert!(enumerate_even_monomials(0, 4).is_err());
    }

    #[test]
    fn graded_lex_order() {
        let b = enumerate_even_monomials(2, 4).unwrap();
        let d = b.descriptor();
        assert_eq!(
            d,
            vec![
                vec![2, 0],
                vec![1, 1],
                vec![0, 2],
                vec![4, 0],
                vec![3, 1],
                vec![2, 2],
                vec![1, 3],
                vec![0, 4],
            ]
        );
    }

    #[test]
    fn univariate_values_and_gradients() {
        let b = enumerate_even_monomials(1, 4).unwrap();
        let (v, g) = b.eval(&DVector::from_vec(vec![2.0])).unwrap();
        assert_eq!(v.as_slice(), &[4.0, 16.0]);
        assert_eq!(g.as_slice(), &[4.0, 32.0]);
    }

    #[test]
    fn origin_vanishes() {
        let b = enumerate_even_monomials(3, 4).unwrap();
        let (v, g) = b.eval(&DVector::zeros(3)).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn scaled_basis_is_a_rescaling() {
        let raw = enumerate_even_monomials(2, 4).unwrap();
        let scaled = raw.clone().with_scale(vec![2.0, 0.5]).unwrap();
        let x = DVector::from_vec(vec![1.3, -0.4]);
        let (v, g) = scaled.eval(&x).unwrap();
        let (vr, gr) = raw.eval(&x).unwrap();
        for (i, t) in raw.terms().iter().enumerate() {
            let f = 2f64.powi(-(t.exponents()[0] as i32)) * 0.5f64.powi(-(t.exponents()[1] as i32));
            assert!((v[i] - f * vr[i]).abs() < 1e-12);
            assert!((g[(0, i)] - f * gr[(0, i)]).abs() < 1e-12);
            assert!((g[(1, i)] - f * gr[(1, i)]).abs() < 1e-12);
        }
        let c = DVector::from_fn(8, |i, _| i as f64 - 3.0);
        let cr = DVector::from_fn(8, |i, _| {
            let e = raw.terms()[i].exponents();
            c[i] * 2f64.powi(-(e[0] as i32)) * 0.5f64.powi(-(e[1] as i32))
        });
        let h = scaled.hessian(&x, &c).unwrap();
        assert!((h - raw.hessian(&x, &cr).unwrap()).amax() < 1e-10);
        assert!(raw.with_scale(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let b = enumerate_even_monomials(3, 4).unwrap();
        assert!(b.values(&DVector::zeros(2)).is_err());
    }

    #[test]
    fn hessian_of_single_term() {
        // x^2 y^2 -> [[2y^2, 4xy], [4xy, 2x^2]]
        let b = enumerate_even_monomials(2, 4).unwrap();
        let i = b.position(&[2, 2]).unwrap();
        let mut c = DVector::zeros(b.len());
        c[i] = 1.0;
        let h = b.hessian(&DVector::from_vec(vec![1.5, -2.0]), &c).unwrap();
        assert_eq!(h[(0, 0)], 8.0);
        assert_eq!(h[(1, 1)], 4.5);
        assert_eq!(h[(0, 1)], -12.0);
        assert_eq!(h[(1, 0)], -12.0);
    }
}
