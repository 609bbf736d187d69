//! Least-squares identification of a lifted bilinear model, residual
//! bounds and the approximate Koopman spectrum.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::{build_w0, least_squares_zeta, ConsistencyError, Dataset};
use crate::io::{IoError, MatrixJson};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EdmdError {
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
    #[error("sample {sample} has z = 0 and u = 0 but a nonzero residual {residual:e}")]
    BoundImpossible { sample: usize, residual: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    Identified,
    GroundTruth,
}

/// `ż = Az + B₀u + Σ uᵢ Bᵢ z`.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedBilinearModel<T: Real> {
    pub a: DMatrix<T>,
    pub b0: DMatrix<T>,
    pub b: Vec<DMatrix<T>>,
    pub source: ModelSource,
}

impl<T: Real> LiftedBilinearModel<T> {
    pub fn new(
        a: DMatrix<T>,
        b0: DMatrix<T>,
        b: Vec<DMatrix<T>>,
        source: ModelSource,
    ) -> Result<Self, EdmdError> {
        let n = a.nrows();
        let m = b0.ncols();
        if a.ncols() != n
            || b0.nrows() != n
            || b.len() != m
            || b.iter().any(|x| x.shape() != (n, n))
        {
            return Err(EdmdError::ShapeMismatch(format!(
                "A {:?}, B0 {:?}, {} input matrices",
                a.shape(),
                b0.shape(),
                b.len()
            )));
        }
        Ok(Self { a, b0, b, source })
    }

    pub fn lifted_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b0.ncols()
    }

    pub fn rhs(&self, z: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        let mut out = &self.a * z + &self.b0 * u;
        for (i, bi) in self.b.iter().enumerate() {
            out += bi * z * u[i];
        }
        out
    }

    /// `[A B₀ B₁ … Bₘ]`, the transpose of a consistency-set candidate.
    pub fn stacked_transpose(&self) -> DMatrix<T> {
        let (n, m) = (self.lifted_dim(), self.input_dim());
        let mut zt = DMatrix::zeros(n, n + m + n * m);
        zt.columns_mut(0, n).copy_from(&self.a);
        zt.columns_mut(n, m).copy_from(&self.b0);
        for (i, bi) in self.b.iter().enumerate() {
            zt.columns_mut(n + m + i * n, n).copy_from(bi);
        }
        zt
    }

    /// Splits `[A B₀ B₁ …]` (`N × (N+m+Nm)`).
    pub fn from_stacked_transpose(zt: &DMatrix<T>, m: usize, source: ModelSource) -> Self {
        let n = zt.nrows();
        Self {
            a: zt.columns(0, n).into_owned(),
            b0: zt.columns(n, m).into_owned(),
            b: (0..m)
                .map(|i| zt.columns(n + m + i * n, n).into_owned())
                .collect(),
            source,
        }
    }

    pub fn to_json(&self) -> ModelJson {
        ModelJson {
            n_lift: self.lifted_dim(),
            m: self.input_dim(),
            a: MatrixJson::from_matrix(&self.a),
            b0: MatrixJson::from_matrix(&self.b0),
            b: self.b.iter().map(MatrixJson::from_matrix).collect(),
            source: self.source,
        }
    }

    pub fn from_json(j: &ModelJson) -> Result<Self, IoError> {
        let b =
            j.b.iter()
                .enumerate()
                .map(|(i, x)| x.to_matrix(&format!("B[{i}]")))
                .collect::<Result<Vec<_>, _>>()?;
        let model = Self::new(j.a.to_matrix("A")?, j.b0.to_matrix("B0")?, b, j.source)
            .map_err(|e| IoError::Invalid(e.to_string()))?;
        if model.lifted_dim() != j.n_lift || model.input_dim() != j.m {
            return Err(IoError::Invalid(
                "declared dimensions disagree with matrices".into(),
            ));
        }
        Ok(model)
    }
}

/// JSON layout `{N, m, A, B0, B[i]}` with row-major matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelJson {
    #[serde(rename = "N")]
    pub n_lift: usize,
    pub m: usize,
    #[serde(rename = "A")]
    pub a: MatrixJson,
    #[serde(rename = "B0")]
    pub b0: MatrixJson,
    #[serde(rename = "B")]
    pub b: Vec<MatrixJson>,
    pub source: ModelSource,
}

/// `[Â B̂₀ B̂₁ …] = Z₁W₀†`.
pub fn identify<T: Real>(ds: &Dataset<T>) -> Result<LiftedBilinearModel<T>, EdmdError> {
    let rep = build_w0(ds)?;
    let zeta = least_squares_zeta(&rep.w0, &ds.z1);
    Ok(LiftedBilinearModel::from_stacked_transpose(
        &zeta.transpose(),
        ds.input_dim(),
        ModelSource::Identified,
    ))
}

/// `R = Z₁ − [Â B̂₀ B̂₁ …]·W₀`.
pub fn residual<T: Real>(ds: &Dataset<T>, model: &LiftedBilinearModel<T>) -> DMatrix<T> {
    &ds.z1 - model.stacked_transpose() * ds.w0()
}

/// `‖r(z,u)‖ ≤ c₁‖z‖ + c₂‖u‖`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBound {
    pub c1: f64,
    pub c2: f64,
}

/// Number of `c₁/c₂` ratios tried by [`estimate_error_bounds`].
pub const BOUND_RATIO_COUNT: usize = 21;

/// Smallest `c₁ + c₂` over log-spaced ratios `c₁/c₂ ∈ [10⁻², 10²]` such
/// that every residual column is covered, scaled by `safety`.
pub fn estimate_error_bounds<T: Real>(
    ds: &Dataset<T>,
    model: &LiftedBilinearModel<T>,
    safety: f64,
) -> Result<ErrorBound, EdmdError> {
    let r = residual(ds, model);
    let rn: Vec<f64> = r.column_iter().map(|c| c.norm().to_f64_lossy()).collect();
    let zn: Vec<f64> = ds
        .z0
        .column_iter()
        .map(|c| c.norm().to_f64_lossy())
        .collect();
    let un: Vec<f64> = ds
        .u0
        .column_iter()
        .map(|c| c.norm().to_f64_lossy())
        .collect();
    let rmax = rn.iter().cloned().fold(0.0, f64::max);
    let floor = 1e-12 * (1.0 + ds.z1.norm().to_f64_lossy());
    if rmax <= floor {
        return Ok(ErrorBound { c1: 0.0, c2: 0.0 });
    }
    for j in 0..rn.len() {
        if zn[j] == 0.0 && un[j] == 0.0 && rn[j] > floor {
            return Err(EdmdError::BoundImpossible {
                sample: j,
                residual: rn[j],
            });
        }
    }
    let mut best: Option<ErrorBound> = None;
    for k in 0..BOUND_RATIO_COUNT {
        let ratio = 10f64.powf(-2.0 + 4.0 * k as f64 / (BOUND_RATIO_COUNT - 1) as f64);
        let mut c2 = 0.0f64;
        for j in 0..rn.len() {
            let denom = ratio * zn[j] + un[j];
            if rn[j] > floor {
                c2 = c2.max(rn[j] / denom);
            }
        }
        let cand = ErrorBound { c1: ratio * c2, c2 };
        if best.is_none_or(|b| cand.c1 + cand.c2 < b.c1 + b.c2) {
            best = Some(cand);
        }
    }
    let b = best.expect("ratio grid is nonempty");
    Ok(ErrorBound {
        c1: b.c1 * safety,
        c2: b.c2 * safety,
    })
}

/// Real modal decomposition `Âᵀ·V = V·Λ̂` behind `Φ̂(x) = VᵀΨ(x)`.
///
/// Complex pairs `a ± ib` occupy 2×2 blocks `[[a, b], [−b, a]]` of `Λ̂`
/// with columns `Re w, Im w` of `V`. When the eigenvector matrix is
/// numerically singular, `V` and `Λ̂` are the real Schur factors instead
/// and `diagonalizable` is false.
#[derive(Debug, Clone)]
pub struct KoopmanSpectrum<T: Real> {
    pub eigenvalues: Vec<Complex<T>>,
    pub v: DMatrix<T>,
    pub lambda: DMatrix<T>,
    pub diagonalizable: bool,
    /// 2-norm condition number of `V`.
    pub condition: f64,
}

impl<T: Real> KoopmanSpectrum<T> {
    /// `Φ̂ = Vᵀz`; complex pairs appear as real and imaginary parts.
    pub fn eigenfunctions(&self, z: &DVector<T>) -> DVector<T> {
        self.v.transpose() * z
    }

    /// `V·Λ̂·V⁻¹`, which reproduces `Âᵀ`.
    pub fn reconstruct(&self) -> DMatrix<T> {
        let vinv = self.v.clone().try_inverse().unwrap_or_else(|| {
            DMatrix::from_element(self.v.nrows(), self.v.ncols(), T::lit(f64::NAN))
        });
        &self.v * &self.lambda * vinv
    }

    /// The model in `Φ̂` coordinates: `Λ̂ᵀ`, `VᵀB₀`, `VᵀBᵢ(Vᵀ)⁻¹`.
    pub fn transform_model(&self, model: &LiftedBilinearModel<T>) -> LiftedBilinearModel<T> {
        let vt = self.v.transpose();
        let vt_inv = vt.clone().try_inverse().expect("V is invertible");
        LiftedBilinearModel {
            a: &vt * &model.a * &vt_inv,
            b0: &vt * &model.b0,
            b: model.b.iter().map(|bi| &vt * bi * &vt_inv).collect(),
            source: model.source,
        }
    }
}

const DIAG_COND_LIMIT: f64 = 1e10;

pub fn koopman_spectrum<T: Real>(model: &LiftedBilinearModel<T>) -> KoopmanSpectrum<T> {
    let at = model.a.transpose();
    let n = at.nrows();
    let mut eigs: Vec<Complex<T>> = at.complex_eigenvalues().iter().cloned().collect();
    eigs.sort_by(|x, y| {
        (x.re, -x.im.abs(), x.im)
            .partial_cmp(&(y.re, -y.im.abs(), y.im))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let scale = T::one() + at.norm();
    let tol = T::lit(1e-7) * scale;
    let mut v = DMatrix::zeros(n, n);
    let mut lambda = DMatrix::zeros(n, n);
    let mut col = 0;
    let mut k = 0;
    while k < n {
        let lam = eigs[k];
        let is_real = lam.im.abs() <= tol;
        // eigenvalues of the same value, to extract a basis of the
        // eigenspace at once
        let mult = eigs[k..]
            .iter()
            .take_while(|e| cabs(*e - lam) <= tol && (is_real == (e.im.abs() <= tol)))
            .count();
        let basis = null_vectors(
            &at,
            if is_real {
                Complex::new(lam.re, T::zero())
            } else {
                lam
            },
            mult,
        );
        for w in basis.iter() {
            if col >= n {
                break;
            }
            if is_real {
                let re = DVector::from_iterator(n, w.iter().map(|c| c.re));
                let im = DVector::from_iterator(n, w.iter().map(|c| c.im));
                let vec = if re.norm() >= im.norm() { re } else { im };
                let nv = vec.norm();
                v.set_column(col, &(vec / nv));
                lambda[(col, col)] = lam.re;
                col += 1;
            } else if col + 1 < n {
                let p = DVector::from_iterator(n, w.iter().map(|c| c.re));
                let q = DVector::from_iterator(n, w.iter().map(|c| c.im));
                v.set_column(col, &p);
                v.set_column(col + 1, &q);
                let (a, b) = (lam.re, lam.im);
                lambda[(col, col)] = a;
                lambda[(col, col + 1)] = b;
                lambda[(col + 1, col)] = -b;
                lambda[(col + 1, col + 1)] = a;
                col += 2;
            }
        }
        // a complex pair consumes its conjugate as well
        k += if is_real { mult } else { 2 * mult };
    }
    let cond = condition_number(&v);
    let resid = (&at * &v - &v * &lambda).norm().to_f64_lossy();
    let resid_ok = resid <= 1e-8 * scale.to_f64_lossy() * v.norm().to_f64_lossy();
    if col == n && resid_ok && cond.is_finite() && cond < DIAG_COND_LIMIT {
        return KoopmanSpectrum {
            eigenvalues: eigs,
            v,
            lambda,
            diagonalizable: true,
            condition: cond,
        };
    }
    let (q, t) = at.clone().schur().unpack();
    KoopmanSpectrum {
        eigenvalues: eigs,
        condition: condition_number(&q),
        v: q,
        lambda: t,
        diagonalizable: false,
    }
}

/// Right singular vectors of `M − λI` for the `k` smallest singular values.
fn null_vectors<T: Real>(m: &DMatrix<T>, lam: Complex<T>, k: usize) -> Vec<DVector<Complex<T>>> {
    let n = m.nrows();
    let mc = DMatrix::from_fn(n, n, |i, j| {
        let base = Complex::new(m[(i, j)], T::zero());
        if i == j {
            base - lam
        } else {
            base
        }
    });
    let svd = mc.svd(false, true);
    let vt = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[a]
            .partial_cmp(&svd.singular_values[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
        .into_iter()
        .take(k)
        .map(|r| {
            let row = vt.row(r);
            let mut w = DVector::from_iterator(n, row.iter().map(|c| c.conj()));
            // fix the phase so the largest entry is real and positive
            let (imax, _) = w.iter().enumerate().fold((0, T::zero()), |acc, (i, c)| {
                if cabs(*c) > acc.1 {
                    (i, cabs(*c))
                } else {
                    acc
                }
            });
            let ph = w[imax] / Complex::new(cabs(w[imax]), T::zero());
            w.iter_mut().for_each(|c| *c /= ph);
            w
        })
        .collect()
}

fn cabs<T: Real>(c: Complex<T>) -> T {
    (c.re * c.re + c.im * c.im).sqrt()
}

fn condition_number<T: Real>(m: &DMatrix<T>) -> f64 {
    let sv = m.clone().singular_values();
    let (mx, mn) = (sv.max().to_f64_lossy(), sv.min().to_f64_lossy());
    if mn <= 0.0 {
        f64::INFINITY
    } else {
        mx / mn
    }
}
