//! Lifted datasets and the set of bilinear systems consistent with them.
//!
//! A candidate `Z = [A B₀ B₁ … Bₘ]ᵀ` is consistent with the data when
//! `(Z−ζ)ᵀ𝐀(Z−ζ) ⪯ 𝐐`, where `𝐀 = W₀W₀ᵀ`, `𝐁 = −W₀Z₁ᵀ`,
//! `𝐂 = Z₁Z₁ᵀ − ΔΔᵀ`, `ζ = −𝐀⁻¹𝐁` and `𝐐 = 𝐁ᵀ𝐀⁻¹𝐁 − 𝐂`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::io::{IoError, MatrixJson};
use crate::lifting::Dictionary;
use crate::linalg::{
    max_eig, pd_inv_sqrt, psd_sqrt, rank, spectral_norm, sym_eig, LinalgError, SymMatrix,
    DEFAULT_RANK_TOL,
};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConsistencyError {
    #[error("W0 has rank {rank} but {rows} rows; the data do not excite every direction")]
    AssumptionViolation { rank: usize, rows: usize },
    #[error("T = {t} samples but at least {needed} are needed for a full-rank W0")]
    InsufficientData { t: usize, needed: usize },
    #[error(
        "Q has eigenvalue {min_eig:e} (max {max_eig:e}); the disturbance bound is too small for the data"
    )]
    DataInconsistent { min_eig: f64, max_eig: f64 },
    #[error("consistency set is empty (Q is indefinite)")]
    EmptySet,
    #[error("gamma has spectral norm {0}, must be at most 1")]
    GammaTooLarge(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Raw time samples behind a dataset, kept for export.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSamples<T: Real> {
    pub t: Vec<T>,
    pub x: Vec<DVector<T>>,
    pub u: Vec<DVector<T>>,
    pub xdot: Vec<DVector<T>>,
}

impl<T: Real> RawSamples<T> {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub seed: Option<u64>,
    pub notes: Vec<String>,
}

/// Lifted data matrices `Z₀, U₀, V₀ⁱ, Z₁` and the energy bound `Δ`.
#[derive(Debug, Clone)]
pub struct Dataset<T: Real> {
    pub z0: DMatrix<T>,
    pub u0: DMatrix<T>,
    /// `V₀ⁱ` with column `j` equal to `uⱼⁱ·zⱼ`.
    pub v0: Vec<DMatrix<T>>,
    pub z1: DMatrix<T>,
    pub delta: DMatrix<T>,
    pub dict_name: String,
    pub provenance: Provenance,
    pub raw: Option<RawSamples<T>>,
    /// Lifted disturbance `∇Ψ(xⱼ)·d̄ⱼ` when the generator knows it.
    pub realized_d0: Option<DMatrix<T>>,
}

impl<T: Real> Dataset<T> {
    /// Builds a dataset from lifted samples; `V₀ⁱ` is derived.
    pub fn from_lifted(
        z0: DMatrix<T>,
        u0: DMatrix<T>,
        z1: DMatrix<T>,
        delta: DMatrix<T>,
        dict_name: impl Into<String>,
    ) -> Result<Self, ConsistencyError> {
        let (n, t) = z0.shape();
        if z1.shape() != (n, t) || u0.ncols() != t || delta.shape() != (n, n) {
            return Err(ConsistencyError::ShapeMismatch(format!(
                "Z0 {:?}, U0 {:?}, Z1 {:?}, Delta {:?}",
                z0.shape(),
                u0.shape(),
                z1.shape(),
                delta.shape()
            )));
        }
        let v0 = (0..u0.nrows())
            .map(|i| {
                let mut v = z0.clone();
                for j in 0..t {
                    let s = u0[(i, j)];
                    v.column_mut(j).scale_mut(s);
                }
                v
            })
            .collect();
        Ok(Self {
            z0,
            u0,
            v0,
            z1,
            delta,
            dict_name: dict_name.into(),
            provenance: Provenance::default(),
            raw: None,
            realized_d0: None,
        })
    }

    /// Lifts raw samples: `zⱼ = Ψ(xⱼ)`, `żⱼ = ∇Ψ(xⱼ)·ẋⱼ`.
    pub fn from_raw(
        dict: &Dictionary<T>,
        raw: RawSamples<T>,
        delta: DMatrix<T>,
    ) -> Result<Self, ConsistencyError> {
        let t = raw.len();
        let nl = dict.lifted_dim();
        let m = raw.u.first().map(|u| u.len()).unwrap_or(0);
        if raw.x.len() != t || raw.u.len() != t || raw.xdot.len() != t {
            return Err(ConsistencyError::ShapeMismatch(
                "raw sample columns have different lengths".into(),
            ));
        }
        let mut z0 = DMatrix::zeros(nl, t);
        let mut z1 = DMatrix::zeros(nl, t);
        let mut u0 = DMatrix::zeros(m, t);
        for j in 0..t {
            if raw.x[j].len() != dict.state_dim() || raw.u[j].len() != m {
                return Err(ConsistencyError::ShapeMismatch(format!("sample {j}")));
            }
            z0.set_column(j, &dict.lift(&raw.x[j]));
            z1.set_column(j, &dict.lift_derivative(&raw.x[j], &raw.xdot[j]));
            u0.set_column(j, &raw.u[j]);
        }
        let mut ds = Self::from_lifted(z0, u0, z1, delta, dict.name())?;
        ds.raw = Some(raw);
        Ok(ds)
    }

    /// Lifted dimension `N`.
    pub fn lifted_dim(&self) -> usize {
        self.z0.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.u0.nrows()
    }

    /// Number of samples `T`.
    pub fn len(&self) -> usize {
        self.z0.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row count of `W₀`: `N + m + N·m`.
    pub fn regressor_dim(&self) -> usize {
        let (n, m) = (self.lifted_dim(), self.input_dim());
        n + m + n * m
    }

    /// `[Z₀; U₀; V₀¹; …; V₀ᵐ]`.
    pub fn w0(&self) -> DMatrix<T> {
        let (n, m, t) = (self.lifted_dim(), self.input_dim(), self.len());
        let mut w = DMatrix::zeros(self.regressor_dim(), t);
        w.rows_mut(0, n).copy_from(&self.z0);
        w.rows_mut(n, m).copy_from(&self.u0);
        for (i, v) in self.v0.iter().enumerate() {
            w.rows_mut(n + m + i * n, n).copy_from(v);
        }
        w
    }

    pub fn with_delta(mut self, delta: DMatrix<T>) -> Self {
        self.delta = delta;
        self
    }

    /// SHA-256 over dimensions, dictionary name and the lifted matrices.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.dict_name.as_bytes());
        for d in [self.lifted_dim(), self.input_dim(), self.len()] {
            h.update((d as u64).to_le_bytes());
        }
        for mat in [&self.z0, &self.u0, &self.z1, &self.delta] {
            for v in mat.iter() {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Compares the realized lifted disturbance energy with `ΔΔᵀ`.
    pub fn energy_report(&self) -> Option<EnergyReport> {
        let d0 = self.realized_d0.as_ref()?;
        let realized = SymMatrix::symmetrize(d0 * d0.transpose());
        let bound = SymMatrix::symmetrize(&self.delta * self.delta.transpose());
        let gap = SymMatrix::symmetrize(bound.as_matrix() - realized.as_matrix());
        let gap_min = -max_eig(&gap.scale(-T::one()));
        Some(EnergyReport {
            realized_max_eig: max_eig(&realized).to_f64_lossy(),
            bound_max_eig: max_eig(&bound).to_f64_lossy(),
            gap_min_eig: gap_min.to_f64_lossy(),
            holds: gap_min.to_f64_lossy() >= -1e-9 * (1.0 + max_eig(&bound).to_f64_lossy()),
        })
    }
}

/// JSON layout of a [`Dataset`]; `V₀ⁱ` is rebuilt on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetJson {
    pub dictionary: String,
    pub fingerprint: String,
    pub provenance: Provenance,
    #[serde(rename = "Z0")]
    pub z0: MatrixJson,
    #[serde(rename = "U0")]
    pub u0: MatrixJson,
    #[serde(rename = "Z1")]
    pub z1: MatrixJson,
    #[serde(rename = "Delta")]
    pub delta: MatrixJson,
}

impl<T: Real> Dataset<T> {
    pub fn to_json(&self) -> DatasetJson {
        DatasetJson {
            dictionary: self.dict_name.clone(),
            fingerprint: self.fingerprint(),
            provenance: self.provenance.clone(),
            z0: MatrixJson::from_matrix(&self.z0),
            u0: MatrixJson::from_matrix(&self.u0),
            z1: MatrixJson::from_matrix(&self.z1),
            delta: MatrixJson::from_matrix(&self.delta),
        }
    }

    /// Rebuilds the dataset; a stale fingerprint is an error.
    pub fn from_json(j: &DatasetJson) -> Result<Self, IoError> {
        let mut ds = Self::from_lifted(
            j.z0.to_matrix("Z0")?,
            j.u0.to_matrix("U0")?,
            j.z1.to_matrix("Z1")?,
            j.delta.to_matrix("Delta")?,
            j.dictionary.clone(),
        )
        .map_err(|e| IoError::Invalid(e.to_string()))?;
        ds.provenance = j.provenance.clone();
        let fp = ds.fingerprint();
        if fp != j.fingerprint {
            return Err(IoError::Invalid(format!(
                "fingerprint mismatch: file says {}, data hashes to {fp}",
                j.fingerprint
            )));
        }
        Ok(ds)
    }
}

/// Realized `D₀D₀ᵀ` against the assumed bound `ΔΔᵀ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub realized_max_eig: f64,
    pub bound_max_eig: f64,
    /// `λ_min(ΔΔᵀ − D₀D₀ᵀ)`.
    pub gap_min_eig: f64,
    pub holds: bool,
}

/// `W₀` with its rank and smallest Gram eigenvalue.
#[derive(Debug, Clone)]
pub struct W0Report<T: Real> {
    pub w0: DMatrix<T>,
    pub rank: usize,
    pub lambda_min: T,
}

/// Stacks `W₀` and checks that it has full row rank.
pub fn build_w0<T: Real>(ds: &Dataset<T>) -> Result<W0Report<T>, ConsistencyError> {
    let needed = ds.regressor_dim();
    if ds.len() < needed {
        return Err(ConsistencyError::InsufficientData {
            t: ds.len(),
            needed,
        });
    }
    let w0 = ds.w0();
    let r = rank(&w0, T::lit(DEFAULT_RANK_TOL));
    let gram = SymMatrix::symmetrize(&w0 * w0.transpose());
    let lambda_min = -max_eig(&gram.scale(-T::one()));
    if r < needed || lambda_min <= T::zero() {
        return Err(ConsistencyError::AssumptionViolation {
            rank: r,
            rows: needed,
        });
    }
    Ok(W0Report {
        w0,
        rank: r,
        lambda_min,
    })
}

/// Least-squares solution `ζ` of `W₀ᵀζ ≈ Z₁ᵀ` through a QR factorization
/// of `W₀ᵀ`; equal to `−𝐀⁻¹𝐁` without forming the normal equations.
pub(crate) fn least_squares_zeta<T: Real>(w0: &DMatrix<T>, z1: &DMatrix<T>) -> DMatrix<T> {
    let qr = w0.transpose().qr();
    let q = qr.q();
    let r = qr.r();
    let rhs = q.transpose() * z1.transpose();
    r.solve_upper_triangular(&rhs)
        .expect("upper triangular factor of a full-rank matrix is invertible")
}

/// The set `{Z : (Z−ζ)ᵀ𝐀(Z−ζ) ⪯ 𝐐}`.
#[derive(Debug, Clone)]
pub struct ConsistencySet<T: Real> {
    pub a: SymMatrix<T>,
    pub b: DMatrix<T>,
    pub c: SymMatrix<T>,
    /// `(N+m+Nm)×N`; `ζᵀ = [Â B̂₀ B̂₁ …]`.
    pub zeta: DMatrix<T>,
    /// `𝐐` as computed, before clipping.
    pub q_raw: SymMatrix<T>,
    /// `𝐐` with roundoff negativity clipped. `None` if `𝐐` is indefinite.
    pub q: Option<SymMatrix<T>>,
    pub q_min_eig: T,
    pub q_max_eig: T,
    pub rho: T,
    pub a_inv_sqrt: SymMatrix<T>,
    pub q_sqrt: Option<SymMatrix<T>>,
    pub n_lift: usize,
    pub m: usize,
}

impl<T: Real> ConsistencySet<T> {
    /// Builds every field; an indefinite `𝐐` is recorded, not rejected.
    pub fn build(ds: &Dataset<T>) -> Result<Self, ConsistencyError> {
        let rep = build_w0(ds)?;
        let w0 = &rep.w0;
        let a = SymMatrix::symmetrize(w0 * w0.transpose());
        let b = -(w0 * ds.z1.transpose());
        let dd = &ds.delta * ds.delta.transpose();
        let c = SymMatrix::symmetrize(&ds.z1 * ds.z1.transpose() - &dd);
        let zeta = least_squares_zeta(w0, &ds.z1);
        // 𝐁ᵀ𝐀⁻¹𝐁 − 𝐂 = ΔΔᵀ − RRᵀ with the least-squares residual R; this
        // form avoids cancelling two large Gram matrices.
        let r = &ds.z1 - zeta.transpose() * w0;
        let q_raw = SymMatrix::symmetrize(dd - &r * r.transpose());
        let eig = sym_eig(&q_raw)?;
        let (q_min, q_max) = (eig.min(), eig.max());
        let roundoff = T::lit(1e-12) * (T::one() + c.as_matrix().norm() + r.norm_squared());
        let inconsistent = q_min < -(T::lit(1e-6) * q_max.max(T::zero()) + roundoff);
        let (q, q_sqrt) = if inconsistent {
            (None, None)
        } else {
            let clip = T::lit(1e-10) * q_max.max(T::zero());
            let qc = eig.map(|l| if l > clip { l } else { T::zero() });
            let qs = psd_sqrt(&qc, T::zero())?;
            (Some(qc), Some(qs))
        };
        let a_inv_sqrt = pd_inv_sqrt(&a)?;
        Ok(Self {
            rho: T::one() / rep.lambda_min,
            a,
            b,
            c,
            zeta,
            q_raw,
            q,
            q_min_eig: q_min,
            q_max_eig: q_max,
            a_inv_sqrt,
            q_sqrt,
            n_lift: ds.lifted_dim(),
            m: ds.input_dim(),
        })
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_none()
    }

    /// `N + m + N·m`.
    pub fn regressor_dim(&self) -> usize {
        self.zeta.nrows()
    }

    /// `1e−8·(1 + λ_max(𝐐))`.
    pub fn default_tol(&self) -> f64 {
        1e-8 * (1.0 + self.q_max_eig.to_f64_lossy().max(0.0))
    }

    /// `λ_max((Z−ζ)ᵀ𝐀(Z−ζ) − 𝐐)`, measured against the clipped `𝐐` when
    /// available.
    pub fn violation(&self, z: &DMatrix<T>) -> Result<T, ConsistencyError> {
        if z.shape() != self.zeta.shape() {
            return Err(ConsistencyError::ShapeMismatch(format!(
                "candidate {:?}, expected {:?}",
                z.shape(),
                self.zeta.shape()
            )));
        }
        let e = z - &self.zeta;
        let q = self.q.as_ref().unwrap_or(&self.q_raw);
        let m = e.transpose() * self.a.as_matrix() * &e - q.as_matrix();
        Ok(max_eig(&SymMatrix::symmetrize(m)))
    }

    /// Transposed candidate blocks `[A B₀ B₁ …]ᵀ` stacked into `Z`.
    pub fn stack(a: &DMatrix<T>, b0: &DMatrix<T>, bs: &[DMatrix<T>]) -> DMatrix<T> {
        let n = a.nrows();
        let m = b0.ncols();
        let mut zt = DMatrix::zeros(n, n + m + n * bs.len());
        zt.columns_mut(0, n).copy_from(a);
        zt.columns_mut(n, m).copy_from(b0);
        for (i, bi) in bs.iter().enumerate() {
            zt.columns_mut(n + m + i * n, n).copy_from(bi);
        }
        zt.transpose()
    }

    /// Splits `Z` into `(A, B₀, [B₁ …])`.
    pub fn unstack(&self, z: &DMatrix<T>) -> (DMatrix<T>, DMatrix<T>, Vec<DMatrix<T>>) {
        let (n, m) = (self.n_lift, self.m);
        let zt = z.transpose();
        let a = zt.columns(0, n).into_owned();
        let b0 = zt.columns(n, m).into_owned();
        let bs = (0..m)
            .map(|i| zt.columns(n + m + i * n, n).into_owned())
            .collect();
        (a, b0, bs)
    }

    pub fn export(&self) -> ConsistencyExport {
        ConsistencyExport {
            n_lift: self.n_lift,
            m: self.m,
            a: MatrixJson::from_matrix(self.a.as_matrix()),
            b: MatrixJson::from_matrix(&self.b),
            c: MatrixJson::from_matrix(self.c.as_matrix()),
            zeta: MatrixJson::from_matrix(&self.zeta),
            q: MatrixJson::from_matrix(self.q.as_ref().unwrap_or(&self.q_raw).as_matrix()),
            q_min_eig: self.q_min_eig.to_f64_lossy(),
            rho: self.rho.to_f64_lossy(),
        }
    }
}

/// JSON view of a [`ConsistencySet`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsistencyExport {
    #[serde(rename = "N")]
    pub n_lift: usize,
    pub m: usize,
    #[serde(rename = "Abold")]
    pub a: MatrixJson,
    #[serde(rename = "Bbold")]
    pub b: MatrixJson,
    #[serde(rename = "Cbold")]
    pub c: MatrixJson,
    pub zeta: MatrixJson,
    #[serde(rename = "Q")]
    pub q: MatrixJson,
    pub q_min_eig: f64,
    pub rho: f64,
}

/// Builds the set and rejects data whose `𝐐` is indefinite.
pub fn build_consistency<T: Real>(ds: &Dataset<T>) -> Result<ConsistencySet<T>, ConsistencyError> {
    let cs = ConsistencySet::build(ds)?;
    if cs.is_empty() {
        return Err(ConsistencyError::DataInconsistent {
            min_eig: cs.q_min_eig.to_f64_lossy(),
            max_eig: cs.q_max_eig.to_f64_lossy(),
        });
    }
    Ok(cs)
}

pub fn membership<T: Real>(
    z: &DMatrix<T>,
    cs: &ConsistencySet<T>,
    tol: f64,
) -> Result<bool, ConsistencyError> {
    Ok(cs.violation(z)?.to_f64_lossy() <= tol)
}

/// `Z = ζ + 𝐀^{−1/2}·γ·𝐐^{1/2}` for `‖γ‖ ≤ 1`.
pub fn sample_consistent<T: Real>(
    cs: &ConsistencySet<T>,
    gamma: &DMatrix<T>,
) -> Result<DMatrix<T>, ConsistencyError> {
    if gamma.shape() != cs.zeta.shape() {
        return Err(ConsistencyError::ShapeMismatch(format!(
            "gamma {:?}, expected {:?}",
            gamma.shape(),
            cs.zeta.shape()
        )));
    }
    let g = spectral_norm(gamma).to_f64_lossy();
    if g > 1.0 + 1e-12 {
        return Err(ConsistencyError::GammaTooLarge(g));
    }
    let qs = cs.q_sqrt.as_ref().ok_or(ConsistencyError::EmptySet)?;
    Ok(&cs.zeta + cs.a_inv_sqrt.as_matrix() * gamma * qs.as_matrix())
}

/// Random `γ` with `‖γ‖ = 1` when `boundary`, otherwise `‖γ‖ ≤ 1`.
pub fn random_gamma<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    boundary: bool,
) -> DMatrix<T> {
    let g = DMatrix::<f64>::from_fn(rows, cols, |_, _| rng.sample(StandardNormal));
    let s = spectral_norm(&g);
    let radius = if boundary { 1.0 } else { rng.random::<f64>() };
    let g = if s > 0.0 { g * (radius / s) } else { g };
    g.map(T::lit)
}

/// `Δ = √(T·δ)·I_N`.
pub fn delta_from_energy<T: Real>(t: usize, delta: f64, n_lift: usize) -> DMatrix<T> {
    assert!(delta >= 0.0, "per-sample energy must be nonnegative");
    DMatrix::identity(n_lift, n_lift) * T::lit((t as f64 * delta).sqrt())
}
