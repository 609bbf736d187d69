//! Dense symmetric linear-algebra kernels.
//!
//! Everything in this crate works on matrices of size at most a few dozen,
//! so plain dense `O(n³)` decompositions are used throughout.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::scalar::{floor_tol, Real};

/// Default relative rank threshold for [`pinv`] and [`rank`].
pub const DEFAULT_RANK_TOL: f64 = 1e-12;

const EIG_MAX_ITER: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {asym:e})")]
    NotSymmetric { asym: f64 },
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eig:e})")]
    NotPsd { min_eig: f64 },
    #[error("matrix is singular or not positive definite (min eigenvalue {min_eig:e})")]
    NotPd { min_eig: f64 },
    #[error("symmetric eigensolver did not converge")]
    NoConvergence,
}

/// Square matrix whose symmetry was checked on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix<T: Real>(DMatrix<T>);

impl<T: Real> SymMatrix<T> {
    /// Accepts `m` if `max |Mᵢⱼ − Mⱼᵢ| ≤ 1e−12·‖M‖`; the stored matrix is
    /// the exact symmetric part.
    pub fn new(m: DMatrix<T>) -> Result<Self, LinalgError> {
        check_square(&m)?;
        check_finite(&m)?;
        let scale = m.norm();
        let mut asym = T::zero();
        for i in 0..m.nrows() {
            for j in (i + 1)..m.ncols() {
                let d = (m[(i, j)] - m[(j, i)]).abs();
                if d > asym {
                    asym = d;
                }
            }
        }
        if asym > floor_tol::<T>(1e-12) * scale {
            return Err(LinalgError::NotSymmetric {
                asym: asym.to_f64_lossy(),
            });
        }
        Ok(Self::symmetrize(m))
    }

    /// Replaces `m` by `(m + mᵀ)/2` without checking.
    pub fn symmetrize(m: DMatrix<T>) -> Self {
        let half = T::lit(0.5);
        let t = m.transpose();
        Self((m + t) * half)
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn from_diagonal(d: &[T]) -> Self {
        Self(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<T> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<T> {
        self.0
    }

    pub fn scale(&self, s: T) -> Self {
        Self(&self.0 * s)
    }

    /// `self · self`, which is symmetric.
    pub fn square(&self) -> Self {
        Self::symmetrize(&self.0 * &self.0)
    }
}

impl<T: Real> AsRef<DMatrix<T>> for SymMatrix<T> {
    fn as_ref(&self) -> &DMatrix<T> {
        &self.0
    }
}

/// Full spectral decomposition with eigenvalues in ascending order.
#[derive(Debug, Clone)]
pub struct EigReport<T: Real> {
    pub eigenvalues: DVector<T>,
    /// Orthonormal eigenvectors stored as columns, matching `eigenvalues`.
    pub eigenvectors: DMatrix<T>,
}

impl<T: Real> EigReport<T> {
    pub fn min(&self) -> T {
        self.eigenvalues[0]
    }

    pub fn max(&self) -> T {
        self.eigenvalues[self.eigenvalues.len() - 1]
    }

    /// `V · diag(g(λ)) · Vᵀ`.
    pub fn map(&self, g: impl Fn(T) -> T) -> SymMatrix<T> {
        let v = &self.eigenvectors;
        let mut scaled = v.clone();
        for (j, lam) in self.eigenvalues.iter().enumerate() {
            let s = g(*lam);
            scaled.column_mut(j).scale_mut(s);
        }
        SymMatrix::symmetrize(scaled * v.transpose())
    }
}

pub fn sym_eig<T: Real>(m: &SymMatrix<T>) -> Result<EigReport<T>, LinalgError> {
    check_finite(&m.0)?;
    let n = m.dim();
    if n == 0 {
        return Ok(EigReport {
            eigenvalues: DVector::zeros(0),
            eigenvectors: DMatrix::zeros(0, 0),
        });
    }
    let eig = SymmetricEigen::try_new(m.0.clone(), T::eps(), EIG_MAX_ITER)
        .ok_or(LinalgError::NoConvergence)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(EigReport {
        eigenvalues,
        eigenvectors,
    })
}

/// Largest eigenvalue. Non-finite input yields NaN.
pub fn max_eig<T: Real>(m: &SymMatrix<T>) -> T {
    match sym_eig(m) {
        Ok(r) if m.dim() > 0 => r.max(),
        Ok(_) => T::zero(),
        Err(_) => T::lit(f64::NAN),
    }
}

/// Smallest eigenvalue. Non-finite input yields NaN.
pub fn min_eig<T: Real>(m: &SymMatrix<T>) -> T {
    match sym_eig(m) {
        Ok(r) if m.dim() > 0 => r.min(),
        Ok(_) => T::zero(),
        Err(_) => T::lit(f64::NAN),
    }
}

/// True iff `λ_max(M) ≤ −margin`.
pub fn is_neg_def<T: Real>(m: &SymMatrix<T>, margin: T) -> bool {
    let l = max_eig(m);
    l.is_finite_val() && l <= -margin
}

/// Caller-scaled margin used for strict inequalities: `1e−9·(1 + ‖M‖)`.
pub fn default_margin<T: Real>(m: &SymMatrix<T>) -> T {
    T::lit(1e-9) * (T::one() + m.0.norm())
}

/// Principal square root of a PSD matrix. Eigenvalues in
/// `[−clip_tol·λ_max, 0)` are treated as roundoff and clipped to zero.
pub fn psd_sqrt<T: Real>(m: &SymMatrix<T>, clip_tol: T) -> Result<SymMatrix<T>, LinalgError> {
    if m.dim() == 0 {
        return Ok(m.clone());
    }
    let e = sym_eig(m)?;
    let lmax = e.max().max(T::zero());
    let floor = -(clip_tol * lmax);
    if e.min() < floor {
        return Err(LinalgError::NotPsd {
            min_eig: e.min().to_f64_lossy(),
        });
    }
    Ok(e.map(|l| if l > T::zero() { l.sqrt() } else { T::zero() }))
}

/// `M^{-1/2}` for a positive definite matrix.
pub fn pd_inv_sqrt<T: Real>(m: &SymMatrix<T>) -> Result<SymMatrix<T>, LinalgError> {
    let e = sym_eig(m)?;
    if m.dim() > 0 && e.min() <= T::zero() {
        return Err(LinalgError::NotPd {
            min_eig: e.min().to_f64_lossy(),
        });
    }
    Ok(e.map(|l| T::one() / l.sqrt()))
}

/// Inverse of a positive definite matrix via Cholesky.
pub fn pd_inverse<T: Real>(m: &SymMatrix<T>) -> Result<SymMatrix<T>, LinalgError> {
    let chol = m.0.clone().cholesky().ok_or_else(|| LinalgError::NotPd {
        min_eig: min_eig(m).to_f64_lossy(),
    })?;
    Ok(SymMatrix::symmetrize(chol.inverse()))
}

/// Moore-Penrose pseudo-inverse. Singular values below
/// `rank_tol · σ_max` are treated as zero.
pub fn pinv<T: Real>(m: &DMatrix<T>, rank_tol: T) -> DMatrix<T> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(c, r);
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cut = rank_tol * smax;
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut out = DMatrix::zeros(c, r);
    for (k, s) in svd.singular_values.iter().enumerate() {
        if *s > cut && *s > T::zero() {
            let inv = T::one() / *s;
            out += vt.row(k).transpose() * u.column(k).transpose() * inv;
        }
    }
    out
}

/// Numerical rank with the same threshold convention as [`pinv`].
pub fn rank<T: Real>(m: &DMatrix<T>, rank_tol: T) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().singular_values();
    let cut = rank_tol * sv.max();
    sv.iter().filter(|s| **s > cut && **s > T::zero()).count()
}

/// Largest singular value.
pub fn spectral_norm<T: Real>(m: &DMatrix<T>) -> T {
    if m.is_empty() {
        return T::zero();
    }
    m.clone().singular_values().max()
}

pub(crate) fn check_square<T: Real>(m: &DMatrix<T>) -> Result<(), LinalgError> {
    if m.nrows() != m.ncols() {
        return Err(LinalgError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(())
}

pub(crate) fn check_finite<T: Real>(m: &DMatrix<T>) -> Result<(), LinalgError> {
    if m.iter().all(|v| v.is_finite_val()) {
        Ok(())
    } else {
        Err(LinalgError::NonFinite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;

    #[test]
    fn identity_eigenvalues() {
        let e = sym_eig(&SymMatrix::<f64>::identity(3)).unwrap();
        assert_eq!(e.eigenvalues.as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_sorted_ascending() {
        let e = sym_eig(&SymMatrix::from_diagonal(&[3.0, 1.0, 2.0])).unwrap();
        for (a, b) in e.eigenvalues.iter().zip([1.0, 2.0, 3.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn two_by_two_matches_quadratic_formula() {
        // λ = (a+c)/2 ± sqrt(((a−c)/2)² + b²)
        let (a, b, c) = (0.7_f64, -1.3, 2.2);
        let m = SymMatrix::new(dmatrix![a, b; b, c]).unwrap();
        let mid = 0.5 * (a + c);
        let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        let e = sym_eig(&m).unwrap();
        assert_abs_diff_eq!(e.eigenvalues[0], mid - rad, epsilon = 1e-10);
        assert_abs_diff_eq!(e.eigenvalues[1], mid + rad, epsilon = 1e-10);
    }

    #[test]
    fn non_finite_rejected() {
        let m = SymMatrix::symmetrize(dmatrix![1.0, f64::NAN; f64::NAN, 1.0]);
        assert_eq!(sym_eig(&m).unwrap_err(), LinalgError::NonFinite);
        assert!(SymMatrix::new(dmatrix![1.0, f64::INFINITY; 0.0, 1.0]).is_err());
    }

    #[test]
    fn asymmetric_rejected() {
        let err = SymMatrix::new(dmatrix![1.0, 2.0; 2.1, 1.0]).unwrap_err();
        assert!(matches!(err, LinalgError::NotSymmetric { .. }));
    }

    #[test]
    fn sqrt_examples() {
        let s = psd_sqrt(&SymMatrix::<f64>::identity(3), 1e-10).unwrap();
        assert_abs_diff_eq!(s.as_matrix(), &DMatrix::identity(3, 3), epsilon = 1e-14);
        let s = psd_sqrt(&SymMatrix::from_diagonal(&[4.0, 9.0]), 1e-10).unwrap();
        assert_abs_diff_eq!(
            s.as_matrix(),
            &dmatrix![2.0, 0.0; 0.0, 3.0],
            epsilon = 1e-12
        );
    }

    #[test]
    fn sqrt_clips_roundoff_but_rejects_real_negativity() {
        let m = SymMatrix::from_diagonal(&[1.0, -1e-13]);
        let s = psd_sqrt(&m, 1e-10).unwrap();
        assert_eq!(s.as_matrix()[(1, 1)], 0.0);
        let m = SymMatrix::from_diagonal(&[1.0, -1e-3]);
        match psd_sqrt(&m, 1e-10) {
            Err(LinalgError::NotPsd { min_eig }) => assert_abs_diff_eq!(min_eig, -1e-3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pinv_examples() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert_abs_diff_eq!(pinv(&i, 1e-12), i, epsilon = 1e-14);
        let p = dmatrix![1.0, 0.0; 0.0, 0.0];
        assert_abs_diff_eq!(pinv(&p, 1e-12), p, epsilon = 1e-14);
    }

    #[test]
    fn neg_def_examples() {
        assert!(is_neg_def(&SymMatrix::from_diagonal(&[-1.0, -1.0]), 0.5));
        assert!(!is_neg_def(&SymMatrix::<f64>::zeros(2), 1e-9));
    }

    #[test]
    fn works_in_single_precision() {
        let m = SymMatrix::new(dmatrix![2.0_f32, 1.0; 1.0, 2.0]).unwrap();
        let e = sym_eig(&m).unwrap();
        assert!((e.min() - 1.0).abs() < 1e-5);
        assert!((e.max() - 3.0).abs() < 1e-5);
    }
}
