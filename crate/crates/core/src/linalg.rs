//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Numerical rank with the usual `sigma_max * max(m, n) * eps` cutoff.
pub fn rank(mat: &DMatrix<f64>) -> usize {
    if mat.is_empty() {
        return 0;
    }
    let sv = mat.clone().singular_values();
    let smax = sv.max();
    let tol = smax * mat.nrows().max(mat.ncols()) as f64 * f64::EPSILON;
    sv.iter().filter(|&&s| s > tol).count()
}

/// `[B, AB, A^2 B, ..., A^{n-1} B]`.
pub fn controllability_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let p = b.ncols();
    let mut out = DMatrix::zeros(n, n * p);
    let mut block = b.clone();
    for k in 0..n {
        out.view_mut((0, k * p), (n, p)).copy_from(&block);
        block = a * &block;
    }
    out
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * m.amax().max(1.0)
}

/// Principal square root of a symmetric positive semidefinite matrix.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.min()
}

/// Solves `min |A X - B|^2 + ridge |X|^2` column by column through a QR
/// factorization of the stacked matrix `[A; sqrt(ridge) I]`.
pub fn ridge_least_squares(a: &DMatrix<f64>, b: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let (k, n) = a.shape();
    if b.nrows() != k {
        return Err(Error::InvalidArgument(format!(
            "least squares: {k} rows in A but {} in B",
            b.nrows()
        )));
    }
    let mut stacked = DMatrix::zeros(k + n, n);
    stacked.view_mut((0, 0), (k, n)).copy_from(a);
    let s = ridge.max(0.0).sqrt();
    for i in 0..n {
        stacked[(k + i, i)] = s;
    }
    let mut rhs = DMatrix::zeros(k + n, b.ncols());
    rhs.view_mut((0, 0), (k, b.ncols())).copy_from(b);

    let qr = stacked.qr();
    let qtb = qr.q().transpose() * rhs;
    let r = qr.r();
    r.solve_upper_triangular(&qtb).ok_or_else(|| Error::SolverFailure {
        reason: "singular triangular factor in least squares".into(),
        residuals: vec![],
    })
}

/// Right singular vectors whose singular values fall below the rank cutoff.
pub fn null_directions(a: &DMatrix<f64>) -> (usize, Vec<DVector<f64>>) {
    let svd = a.clone().svd(false, true);
    let smax = svd.singular_values.max();
    let tol = smax * a.nrows().max(a.ncols()) as f64 * f64::EPSILON;
    let v_t = svd.v_t.expect("requested V^T");
    let mut rank = 0;
    let mut null = Vec::new();
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            rank += 1;
        } else {
            null.push(v_t.row(i).transpose());
        }
    }
    // thin SVD drops directions when rows < cols; those are not reachable here
    (rank, null)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_of_singular_matrix() {
        let m = DMatrix::from_row_slice(3, 3, &[1., 2., 1., 0., 1., 0., 2., 5., 2.]);
        assert_eq!(rank(&m), 2);
    }

    #[test]
    fn double_integrator_controllable() {
        let a = DMatrix::from_row_slice(2, 2, &[0., 1., 0., 0.]);
        let b = DMatrix::from_column_slice(2, 1, &[0., 1.]);
        assert_eq!(rank(&controllability_matrix(&a, &b)), 2);
    }

    #[test]
    fn ridge_ls_recovers_exact_solution() {
        let a = DMatrix::from_row_slice(4, 2, &[1., 0., 0., 1., 1., 1., 2., -1.]);
        let x = DMatrix::from_row_slice(2, 1, &[0.5, -3.0]);
        let b = &a * &x;
        let sol = ridge_least_squares(&a, &b, 0.0).unwrap();
        assert!((sol - x).amax() < 1e-14);
    }

    #[test]
    fn sqrt_roundtrip() {
        let m = DMatrix::from_row_slice(2, 2, &[2., 1., 1., 2.]);
        let s = sym_sqrt(&m);
        assert!((&s * &s - m).amax() < 1e-12);
    }
}
