//! Small dense linear-algebra helpers. Factorizations go through faer;
//! the rest of the crate works with nalgebra types.

use faer::linalg::solvers::Solve;
use faer::{Mat, MatRef, Side};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value cutoff for pseudoinverses.
pub const PINV_RCOND: f64 = 1e-10;

/// Arguments above this are rejected by [`checked_exp`].
pub const EXP_GUARD: f64 = 700.0;

fn to_faer(m: &DMatrix<f64>) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn from_faer(m: MatRef<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn column(v: &DVector<f64>) -> Mat<f64> {
    Mat::from_fn(v.len(), 1, |i, _| v[i])
}

fn finite_column(x: &Mat<f64>) -> Option<DVector<f64>> {
    let out = DVector::from_fn(x.nrows(), |i, _| x[(i, 0)]);
    out.iter().all(|v| v.is_finite()).then_some(out)
}

/// Solves `A·x = b` by LU with partial pivoting; `None` if `A` is
/// numerically singular.
pub fn lu_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if a.is_empty() {
        return Some(DVector::zeros(0));
    }
    let lu = to_faer(a).partial_piv_lu();
    finite_column(&lu.solve(column(b)))
}

/// Solves `A·x = b` for symmetric positive definite `A`; `None` if the
/// Cholesky factorization fails.
pub fn cholesky_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if a.is_empty() {
        return Some(DVector::zeros(0));
    }
    let llt = to_faer(a).llt(Side::Lower).ok()?;
    finite_column(&llt.solve(column(b)))
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_symmetric_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    if sym.is_empty() {
        return f64::NEG_INFINITY;
    }
    match to_faer(sym).self_adjoint_eigenvalues(Side::Lower) {
        Ok(vals) => vals.into_iter().fold(f64::NEG_INFINITY, f64::max),
        Err(_) => f64::NAN,
    }
}

/// Projects a symmetric matrix onto the negative semidefinite cone by
/// truncating positive eigenvalues to zero.
pub fn project_symmetric_nsd(sym: &DMatrix<f64>) -> DMatrix<f64> {
    if sym.is_empty() {
        return sym.clone();
    }
    let eig = to_faer(sym)
        .self_adjoint_eigen(Side::Lower)
        .expect("eigendecomposition of a finite symmetric matrix");
    let vals = eig.S().column_vector();
    if (0..vals.nrows()).all(|i| vals[i] <= 0.0) {
        return sym.clone();
    }
    let vecs = from_faer(eig.U());
    let mut scaled = vecs.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= vals[j].min(0.0);
    }
    let out = scaled * vecs.transpose();
    // restore exact symmetry lost to rounding
    (&out + out.transpose()) * 0.5
}

/// Moore–Penrose pseudoinverse from a singular value decomposition.
pub struct PseudoInverse {
    u: DMatrix<f64>,
    v: DMatrix<f64>,
    inv_sigma: DVector<f64>,
    rank: usize,
}

impl PseudoInverse {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular("non-finite matrix in singular value decomposition"));
        }
        let svd = to_faer(&matrix)
            .thin_svd()
            .map_err(|_| Error::Singular("singular value decomposition"))?;
        let s = svd.S().column_vector();
        let sigma = DVector::from_fn(s.nrows(), |i, _| s[i]);
        let sigma_max = sigma.iter().copied().fold(0.0, f64::max);
        let cutoff = PINV_RCOND * sigma_max;
        let inv_sigma = sigma.map(|s| if s > cutoff { 1.0 / s } else { 0.0 });
        let rank = inv_sigma.iter().filter(|&&s| s > 0.0).count();
        Ok(Self {
            u: from_faer(svd.U()),
            v: from_faer(svd.V()),
            inv_sigma,
            rank,
        })
    }

    /// Number of singular values above the cutoff.
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// `A†·x`.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let w = self.u.tr_mul(x).component_mul(&self.inv_sigma);
        &self.v * w
    }

    /// `(A†)ᵀ·x`.
    pub fn apply_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        let w = self.v.tr_mul(x).component_mul(&self.inv_sigma);
        &self.u * w
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let mut scaled = self.v.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= self.inv_sigma[j];
        }
        scaled * self.u.transpose()
    }
}

/// Numerically stable `log Σ exp(x)`.
pub fn log_sum_exp<I>(values: I) -> f64
where
    I: IntoIterator<Item = f64>,
    I::IntoIter: Clone,
{
    let it = values.into_iter();
    let max = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + it.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Elementwise `exp` that refuses arguments above [`EXP_GUARD`].
pub fn checked_exp(z: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some((index, &value)) = z.iter().enumerate().find(|(_, v)| !(**v <= EXP_GUARD)) {
        return Err(Error::ExpOverflow { index, value });
    }
    Ok(z.map(f64::exp))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_is_shift_stable() {
        let v = [1000.0, 1000.0];
        assert!((log_sum_exp(v) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((log_sum_exp([0.0, 0.0, 0.0]) - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn exp_guard() {
        assert!(checked_exp(&DVector::from_vec(vec![1.0, 700.5])).is_err());
        assert!(checked_exp(&DVector::from_vec(vec![f64::NAN])).is_err());
        assert_eq!(checked_exp(&DVector::from_vec(vec![0.0])).unwrap()[0], 1.0);
    }

    #[test]
    fn pinv_of_invertible_is_inverse() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 4.0]);
        let p = PseudoInverse::new(a.clone()).unwrap();
        let inv = a.clone().try_inverse().unwrap();
        assert!((p.matrix() - &inv).amax() < 1e-12);
        let x = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        assert!((p.apply_transpose(&x) - inv.transpose() * &x).amax() < 1e-12);
        assert!((p.apply(&x) - inv * &x).amax() < 1e-12);
    }

    #[test]
    fn pinv_of_rank_deficient() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let p = PseudoInverse::new(a.clone()).unwrap();
        let expected = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
        assert!((p.matrix() - expected).amax() < 1e-12);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let p = PseudoInverse::new(singular.clone()).unwrap();
        assert_eq!(p.rank(), 1);
        let m = p.matrix();
        assert!((&singular * &m * &singular - &singular).amax() < 1e-12);
    }

    #[test]
    fn solvers() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let x = lu_solve(&a, &b).unwrap();
        assert!((&a * &x - &b).amax() < 1e-12);
        let x = cholesky_solve(&a, &b).unwrap();
        assert!((&a * &x - &b).amax() < 1e-12);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(lu_solve(&singular, &DVector::from_vec(vec![1.0, 0.0])).is_none());
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(cholesky_solve(&indefinite, &DVector::from_vec(vec![1.0, 0.0])).is_none());
        assert!((max_symmetric_eigenvalue(&a) - 4.732050807568877).abs() < 1e-12);
    }

    #[test]
    fn nsd_projection_truncates() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -2.0]);
        let p = project_symmetric_nsd(&s);
        assert!((p - DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, -2.0])).amax() < 1e-14);
    }
}
