//! Solver-independent checks of synthesized certificates: matrix
//! inequalities evaluated at the certificate, randomized sweeps over the
//! consistency set, and closed-loop simulation.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::{random_gamma, sample_consistent, ConsistencyError, ConsistencySet};
use crate::edmd::{ErrorBound, LiftedBilinearModel};
use crate::lifting::Dictionary;
use crate::linalg::{max_eig, pd_inverse, psd_sqrt, spectral_norm, LinalgError, SymMatrix};
use crate::lmi::Assignment;
use crate::plant::{simulate, ControlAffinePlant, DisturbanceModel, PlantError, Trajectory};
use crate::scalar::Real;
use crate::synthesis::{assemble_direct_lmi, ControllerCert, Route, SynthError, SynthesisConfig};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("invalid scalars: {0}")]
    InvalidScalars(String),
    #[error("P < rho/(mu nu) I fails (lambda_max(P) = {p_max:e}, limit {limit:e})")]
    SideConditionViolated { p_max: f64, limit: f64 },
    #[error("perturbation is not of higher order near the origin: ratios {ratios:?}")]
    OrderConditionViolated { ratios: Vec<f64> },
    #[error("only single-input checks are supported here (m = {0})")]
    Unsupported(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error("assembly failed: {0}")]
    Assembly(String),
}

/// Outcome of one check. For matrix checks `margin` is `λ_max`; for
/// sampled checks it is the worst sample value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub pass: bool,
    pub margin: f64,
    pub required_margin: f64,
    pub samples: usize,
    pub violations: usize,
    pub details: Vec<String>,
}

impl CheckReport {
    fn matrix(name: &str, lmax: f64, required: f64) -> Self {
        Self {
            name: name.to_string(),
            pass: lmax.is_finite() && lmax <= -required,
            margin: lmax,
            required_margin: required,
            samples: 1,
            violations: usize::from(!(lmax.is_finite() && lmax <= -required)),
            details: Vec::new(),
        }
    }

    fn sampled(
        name: &str,
        worst: f64,
        samples: usize,
        violations: usize,
        details: Vec<String>,
    ) -> Self {
        Self {
            name: name.to_string(),
            pass: violations == 0,
            margin: worst,
            required_margin: 0.0,
            samples,
            violations,
            details,
        }
    }
}

/// Scalars entering the nonlinear inequality of the nominal design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub alpha: f64,
    pub beta: f64,
    pub c: f64,
    pub nu: f64,
    pub tau: f64,
    pub bounds: ErrorBound,
}

impl Multipliers {
    pub fn of<T: Real>(cert: &ControllerCert<T>) -> Self {
        Self {
            alpha: cert.alpha,
            beta: cert.beta,
            c: cert.c,
            nu: cert.nu,
            tau: cert.tau,
            bounds: cert.bounds,
        }
    }

    fn validate(&self) -> Result<(), VerifyError> {
        if !(self.tau > 0.0 && self.nu > 0.0 && self.c > 0.0) {
            return Err(VerifyError::InvalidScalars(format!(
                "tau = {}, nu = {}, c = {}",
                self.tau, self.nu, self.c
            )));
        }
        Ok(())
    }
}

/// `τI + (αc₁²/τ)P² + (βc₂²/τ + c/ν)LLᵀ`.
fn r_term<T: Real>(p: &DMatrix<T>, l: &DMatrix<T>, mu: &Multipliers) -> DMatrix<T> {
    let n = p.nrows();
    let (c1, c2) = (mu.bounds.c1, mu.bounds.c2);
    let llt = l * l.transpose();
    DMatrix::<T>::identity(n, n) * T::lit(mu.tau)
        + p * p * T::lit(mu.alpha * c1 * c1 / mu.tau)
        + llt * T::lit(mu.beta * c2 * c2 / mu.tau + mu.c / mu.nu)
}

fn lyap_part<T: Real>(
    p: &DMatrix<T>,
    l: &DMatrix<T>,
    model: &LiftedBilinearModel<T>,
) -> DMatrix<T> {
    let ap = &model.a * p;
    let bl = &model.b0 * l.transpose();
    &ap + ap.transpose() + &bl + bl.transpose()
}

fn lam_max<T: Real>(m: DMatrix<T>) -> f64 {
    max_eig(&SymMatrix::symmetrize(m)).to_f64_lossy()
}

/// The nominal nonlinear inequality at `(P, L)` for an explicit model.
pub fn nominal_matrix<T: Real>(
    p: &DMatrix<T>,
    l: &DMatrix<T>,
    model: &LiftedBilinearModel<T>,
    mu: &Multipliers,
) -> Result<DMatrix<T>, VerifyError> {
    mu.validate()?;
    let n = model.lifted_dim();
    if p.shape() != (n, n) || l.shape() != (n, model.input_dim()) {
        return Err(VerifyError::ShapeMismatch(format!(
            "P {:?}, L {:?} for N = {n}, m = {}",
            p.shape(),
            l.shape(),
            model.input_dim()
        )));
    }
    let mut m = lyap_part(p, l, model) + r_term(p, l, mu);
    for bi in &model.b {
        m += bi * p * bi.transpose() * T::lit(mu.nu);
    }
    Ok(m)
}

pub fn check_nominal_nmi<T: Real>(
    p: &DMatrix<T>,
    l: &DMatrix<T>,
    model: &LiftedBilinearModel<T>,
    mu: &Multipliers,
    margin: f64,
) -> Result<CheckReport, VerifyError> {
    let m = nominal_matrix(p, l, model, mu)?;
    Ok(CheckReport::matrix("nominal", lam_max(m), margin))
}

fn cert_assignment<T: Real>(cert: &ControllerCert<T>) -> Assignment<T> {
    let mut a = Assignment::new();
    a.insert("P".into(), cert.p.clone());
    a.insert("L".into(), cert.l.clone());
    a.insert("tau".into(), DMatrix::from_element(1, 1, T::lit(cert.tau)));
    a.insert(
        "mu_inv".into(),
        DMatrix::from_element(1, 1, T::lit(1.0 / cert.mu)),
    );
    a
}

fn cert_config<T: Real>(cert: &ControllerCert<T>) -> SynthesisConfig {
    SynthesisConfig::new(Route::Direct, cert.alpha, cert.beta, cert.c, cert.bounds)
}

fn p_is_pd<T: Real>(p: &DMatrix<T>) -> bool {
    -max_eig(&SymMatrix::symmetrize(-p.clone())).to_f64_lossy() > 0.0
}

/// The data-based block inequality evaluated at the certificate.
pub fn check_data_lmi<T: Real>(
    cert: &ControllerCert<T>,
    cs: &ConsistencySet<T>,
    margin: f64,
) -> Result<CheckReport, VerifyError> {
    if cert.input_dim() != 1 {
        return Err(VerifyError::Unsupported(cert.input_dim()));
    }
    Multipliers::of(cert).validate()?;
    let (vars, cons) =
        assemble_direct_lmi(cs, &cert_config(cert), cert.nu).map_err(|e| match e {
            SynthError::Unsupported(m) => VerifyError::Unsupported(m),
            e => VerifyError::Assembly(e.to_string()),
        })?;
    let f = cons[0]
        .eval(&vars, &cert_assignment(cert))
        .map_err(|e| VerifyError::Assembly(e.to_string()))?;
    let mut r = CheckReport::matrix("data-based", lam_max(f), margin);
    if !(p_is_pd(&cert.p) && cert.mu > 0.0) {
        r.pass = false;
        r.details
            .push("P not positive definite or mu not positive".into());
    }
    Ok(r)
}

/// The model-based nonlinear inequality evaluated at the certificate,
/// after checking `λ_max(P) < ρ/(μν)`.
pub fn model_nmi_matrix<T: Real>(
    cert: &ControllerCert<T>,
    model: &LiftedBilinearModel<T>,
    delta: &DMatrix<T>,
    rho: f64,
) -> Result<DMatrix<T>, VerifyError> {
    let mu = Multipliers::of(cert);
    mu.validate()?;
    if !(cert.mu > 0.0 && rho > 0.0) {
        return Err(VerifyError::InvalidScalars(format!(
            "mu = {}, rho = {rho}",
            cert.mu
        )));
    }
    let n = model.lifted_dim();
    if delta.nrows() != n {
        return Err(VerifyError::ShapeMismatch(format!(
            "Delta has {} rows, N = {n}",
            delta.nrows()
        )));
    }
    let p = &cert.p;
    let l = &cert.l;
    let p_max = lam_max(p.clone());
    let limit = rho / (cert.mu * cert.nu);
    if !(p_max < limit) {
        return Err(VerifyError::SideConditionViolated { p_max, limit });
    }
    let k = cert.mu * cert.nu / rho;
    let shrink = DMatrix::<T>::identity(n, n) - p * T::lit(k);
    let shrink_inv = shrink
        .try_inverse()
        .ok_or(VerifyError::SideConditionViolated { p_max, limit })?;
    let mut m = lyap_part(p, l, model) + r_term(p, l, &mu);
    m += delta * delta.transpose() * T::lit(1.0 / cert.mu);
    m += (p * p + l * l.transpose()) * T::lit(cert.mu / rho);
    for bi in &model.b {
        m += bi * p * &shrink_inv * bi.transpose() * T::lit(cert.nu);
    }
    Ok(m)
}

pub fn check_model_nmi<T: Real>(
    cert: &ControllerCert<T>,
    model: &LiftedBilinearModel<T>,
    delta: &DMatrix<T>,
    rho: f64,
    margin: f64,
) -> Result<CheckReport, VerifyError> {
    let m = model_nmi_matrix(cert, model, delta, rho)?;
    let mut r = CheckReport::matrix("model-based", lam_max(m), margin);
    if !p_is_pd(&cert.p) {
        r.pass = false;
        r.details.push("P not positive definite".into());
    }
    Ok(r)
}

/// Outcome of a sampled S-lemma test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PetersenReport {
    /// `λ_max(𝐂 + μMMᵀ + μ⁻¹N·D̄·Nᵀ)`.
    pub condition_max_eig: f64,
    pub condition_holds: bool,
    pub samples: usize,
    pub violations: usize,
    /// Largest `λ_max(𝐂 + MDNᵀ + NDᵀMᵀ)` seen.
    pub worst: f64,
}

impl PetersenReport {
    pub fn to_check(&self) -> CheckReport {
        let mut r = CheckReport::sampled(
            "petersen",
            self.worst,
            self.samples,
            self.violations,
            Vec::new(),
        );
        if !self.condition_holds {
            r.details.push(format!(
                "multiplier condition fails (lambda_max = {:e}); samples are informative only",
                self.condition_max_eig
            ));
        }
        r
    }
}

/// `D = G·D̄^{1/2}` with `‖G‖ = 1` (boundary) or `‖G‖ ≤ 1`.
pub fn sample_bounded_d<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    dbar_sqrt: &DMatrix<f64>,
    boundary: bool,
) -> DMatrix<f64> {
    let q = dbar_sqrt.nrows();
    let g = DMatrix::<f64>::from_fn(rows, q, |_, _| rng.sample(StandardNormal));
    let s = spectral_norm(&g);
    let radius = if boundary { 1.0 } else { rng.random::<f64>() };
    let g = if s > 0.0 { g * (radius / s) } else { g };
    g * dbar_sqrt
}

/// Checks `𝐂 + μMMᵀ + μ⁻¹N·D̄·Nᵀ ≺ 0` and then samples `D` with
/// `DᵀD ⪯ D̄`, counting samples where `𝐂 + MDNᵀ + NDᵀMᵀ` is not negative
/// definite. Half the samples lie on the boundary `‖G‖ = 1`. Sample `k`
/// draws from its own stream so the result does not depend on threading.
pub fn petersen_sample_check(
    cm: &DMatrix<f64>,
    m: &DMatrix<f64>,
    nm: &DMatrix<f64>,
    dbar: &DMatrix<f64>,
    mu: f64,
    n_samples: usize,
    seed: u64,
) -> Result<PetersenReport, VerifyError> {
    let n = cm.nrows();
    if cm.ncols() != n
        || m.nrows() != n
        || nm.nrows() != n
        || dbar.nrows() != nm.ncols()
        || dbar.ncols() != nm.ncols()
    {
        return Err(VerifyError::ShapeMismatch("C, M, N, Dbar".into()));
    }
    if !(mu > 0.0) {
        return Err(VerifyError::InvalidScalars(format!("mu = {mu}")));
    }
    let cond = cm + m * m.transpose() * mu + nm * dbar * nm.transpose() / mu;
    let cond_max = lam_max(cond);
    let dbar_sqrt = psd_sqrt(&SymMatrix::new(dbar.clone())?, 1e-12)?.into_inner();
    let results: Vec<f64> = (0..n_samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let d = sample_bounded_d(&mut rng, m.ncols(), &dbar_sqrt, k % 2 == 0);
            let mdn = m * d * nm.transpose();
            lam_max(cm + &mdn + mdn.transpose())
        })
        .collect();
    let violations = results.iter().filter(|v| !(**v < 0.0)).count();
    let worst = results.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(PetersenReport {
        condition_max_eig: cond_max,
        condition_holds: cond_max < 0.0,
        samples: n_samples,
        violations,
        worst,
    })
}

/// Evaluates the nominal inequality at the center of the consistency set
/// and at sampled members `Z = ζ + 𝐀^{−1/2}γ𝐐^{1/2}`; the first
/// `n_boundary` samples use `‖γ‖ = 1`.
pub fn sweep_consistent_stability<T: Real>(
    cert: &ControllerCert<T>,
    cs: &ConsistencySet<T>,
    n_samples: usize,
    n_boundary: usize,
    seed: u64,
    margin: f64,
) -> Result<CheckReport, VerifyError> {
    if cs.m != 1 {
        return Err(VerifyError::Unsupported(cs.m));
    }
    let mu = Multipliers::of(cert);
    let (rows, cols) = cs.zeta.shape();
    let eval = |z: &DMatrix<T>| -> Result<f64, VerifyError> {
        let (a, b0, b) = cs.unstack(z);
        let model = LiftedBilinearModel {
            a,
            b0,
            b,
            source: crate::edmd::ModelSource::Identified,
        };
        Ok(lam_max(nominal_matrix(&cert.p, &cert.l, &model, &mu)?))
    };
    let center = eval(&cs.zeta)?;
    let values: Vec<Result<f64, VerifyError>> = (0..n_samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let g = random_gamma::<T, _>(&mut rng, rows, cols, k < n_boundary);
            eval(&sample_consistent(cs, &g)?)
        })
        .collect();
    let mut all = vec![center];
    for v in values {
        all.push(v?);
    }
    let mut details = Vec::new();
    let mut violations = 0;
    for (k, v) in all.iter().enumerate() {
        if !(*v <= -margin) {
            violations += 1;
            if details.len() < 10 {
                let which = if k == 0 {
                    "center".to_string()
                } else {
                    format!("sample {}", k - 1)
                };
                details.push(format!("{which}: lambda_max = {v:e}"));
            }
        }
    }
    let worst = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut r = CheckReport::sampled("consistency sweep", worst, all.len(), violations, details);
    r.required_margin = margin;
    Ok(r)
}

/// `Ψ(x)ᵀP⁻¹Ψ(x)`.
pub fn lyapunov_value<T: Real>(x: &DVector<T>, p_inv: &DMatrix<T>, dict: &Dictionary<T>) -> f64 {
    let z = dict.lift(x);
    (z.transpose() * p_inv * &z)[(0, 0)].to_f64_lossy()
}

pub fn roa_membership<T: Real>(
    x: &DVector<T>,
    cert: &ControllerCert<T>,
    dict: &Dictionary<T>,
) -> Result<bool, VerifyError> {
    let p_inv = pd_inverse(&SymMatrix::symmetrize(cert.p.clone()))?;
    Ok(lyapunov_value(x, p_inv.as_matrix(), dict) <= cert.c)
}

/// Requires `V(x_{k+1}) − V(x_k) < 10⁻¹²(1 + V(x_k))` between consecutive
/// samples that both lie in the certified level set.
pub fn lyapunov_decrease<T: Real>(
    traj: &Trajectory<T>,
    cert: &ControllerCert<T>,
    dict: &Dictionary<T>,
) -> Result<CheckReport, VerifyError> {
    let p_inv = pd_inverse(&SymMatrix::symmetrize(cert.p.clone()))?;
    let v: Vec<f64> = traj
        .states
        .iter()
        .map(|x| lyapunov_value(x, p_inv.as_matrix(), dict))
        .collect();
    let mut worst = f64::NEG_INFINITY;
    let mut violations = 0;
    let mut pairs = 0;
    let mut details = Vec::new();
    for k in 1..v.len() {
        if v[k - 1] > cert.c || v[k] > cert.c {
            continue;
        }
        pairs += 1;
        let diff = v[k] - v[k - 1];
        let excess = diff - 1e-12 * (1.0 + v[k - 1]);
        worst = worst.max(excess);
        if !(excess < 0.0) {
            violations += 1;
            if details.len() < 10 {
                details.push(format!(
                    "t = {:.4}: V {:e} -> {:e}",
                    traj.times[k].to_f64_lossy(),
                    v[k - 1],
                    v[k]
                ));
            }
        }
    }
    Ok(CheckReport::sampled(
        "lyapunov decrease",
        worst,
        pairs,
        violations,
        details,
    ))
}

/// Points `r·(cos θ, sin θ)` at the first radius along each of
/// `directions` rays where `Ψ(x)ᵀP⁻¹Ψ(x)` reaches `fraction·c`. Rays that
/// stay below the level out to `r_max` are skipped.
pub fn level_set_points<T: Real>(
    cert: &ControllerCert<T>,
    dict: &Dictionary<T>,
    directions: usize,
    fraction: f64,
    r_max: f64,
) -> Result<Vec<DVector<f64>>, VerifyError> {
    if dict.state_dim() != 2 {
        return Err(VerifyError::Unsupported(dict.state_dim()));
    }
    let p_inv = pd_inverse(&SymMatrix::symmetrize(cert.p.clone()))?.into_inner();
    let level = fraction * cert.c;
    let v = |x: &DVector<f64>| lyapunov_value(&x.map(T::lit), &p_inv, dict);
    let mut out = Vec::new();
    for k in 0..directions {
        let th = 2.0 * std::f64::consts::PI * k as f64 / directions as f64;
        let d = DVector::from_vec(vec![th.cos(), th.sin()]);
        let step = r_max / 2000.0;
        let mut lo = 0.0;
        let mut hi = None;
        let mut r = step;
        while r <= r_max {
            if v(&(&d * r)) >= level {
                hi = Some(r);
                break;
            }
            lo = r;
            r += step;
        }
        let Some(mut hi) = hi else { continue };
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if v(&(&d * mid)) >= level {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        out.push(&d * lo);
    }
    Ok(out)
}

type LiftedMap<T> = Arc<dyn Fn(&DVector<T>) -> DVector<T> + Send + Sync>;

/// Additive nonlinear input term `u_n(z)`.
#[derive(Clone)]
pub struct PerturbationSpec<T: Real> {
    pub name: String,
    pub u_n: LiftedMap<T>,
}

impl<T: Real> PerturbationSpec<T> {
    pub fn new(
        name: &str,
        u_n: impl Fn(&DVector<T>) -> DVector<T> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.to_string(),
            u_n: Arc::new(u_n),
        }
    }

    pub fn zero(m: usize) -> Self {
        Self::new("zero", move |_| DVector::zeros(m))
    }

    /// `u_n(z) = s·(zᵀz)·Kz`.
    pub fn cubic(k: DMatrix<T>, s: f64) -> Self {
        Self::new("cubic", move |z: &DVector<T>| {
            &k * z * (z.dot(z) * T::lit(s))
        })
    }

    /// Largest `‖u_n(z)‖/‖z‖` over `dirs` random directions on each sphere
    /// `‖z‖ = r`.
    pub fn order_witness(&self, n_lift: usize, radii: &[f64], dirs: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let units: Vec<DVector<f64>> = (0..dirs)
            .map(|_| {
                let v = DVector::<f64>::from_fn(n_lift, |_, _| rng.sample(StandardNormal));
                let n = v.norm();
                v / n
            })
            .collect();
        radii
            .iter()
            .map(|&r| {
                units
                    .iter()
                    .map(|u| {
                        let z = u.map(|x| T::lit(x * r));
                        (self.u_n)(&z).norm().to_f64_lossy() / r
                    })
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    /// The ratio must not grow as the radius shrinks and must end at most
    /// a tenth of its starting value (or vanish).
    pub fn is_higher_order(ratios: &[f64]) -> bool {
        if ratios.iter().any(|r| !r.is_finite()) {
            return false;
        }
        let monotone = ratios
            .windows(2)
            .all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-300);
        let first = ratios.first().copied().unwrap_or(0.0);
        let last = ratios.last().copied().unwrap_or(0.0);
        monotone && (last <= 0.1 * first || last <= 1e-14)
    }
}

/// Radii at which the order condition is probed.
pub const ORDER_RADII: [f64; 5] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5];

/// Settings for [`perturbed_controller_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbedRun {
    pub radii: Vec<f64>,
    pub directions: usize,
    pub t_end: f64,
    pub h: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for PerturbedRun {
    fn default() -> Self {
        Self {
            radii: vec![0.02, 0.05, 0.1],
            directions: 8,
            t_end: 30.0,
            h: 1e-3,
            tol: 1e-3,
            seed: 0,
        }
    }
}

/// Initial states `r·(cos θ, sin θ)` with evenly spaced `θ` for `n = 2`,
/// random unit directions otherwise.
pub fn sphere_points(n: usize, radii: &[f64], directions: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs: Vec<DVector<f64>> = (0..directions)
        .map(|k| {
            if n == 2 {
                let th = 2.0 * std::f64::consts::PI * k as f64 / directions as f64;
                DVector::from_vec(vec![th.cos(), th.sin()])
            } else {
                let v = DVector::<f64>::from_fn(n, |_, _| rng.sample(StandardNormal));
                let nv = v.norm();
                v / nv
            }
        })
        .collect();
    radii
        .iter()
        .flat_map(|&r| dirs.iter().map(move |d| d * r))
        .collect()
}

/// Simulates `u = Kz + u_n(z)` without disturbance from every initial
/// point and requires `‖x(t_end)‖ ≤ tol`. The perturbation is rejected up
/// front unless it is of higher order at the origin.
pub fn perturbed_controller_check<T: Real>(
    cert: &ControllerCert<T>,
    plant: &ControlAffinePlant<T>,
    dict: &Dictionary<T>,
    pert: &PerturbationSpec<T>,
    run: &PerturbedRun,
) -> Result<CheckReport, VerifyError> {
    let ratios = pert.order_witness(dict.lifted_dim(), &ORDER_RADII, 32, run.seed);
    if !PerturbationSpec::<T>::is_higher_order(&ratios) {
        return Err(VerifyError::OrderConditionViolated { ratios });
    }
    let k = cert.k.clone();
    let u_n = pert.u_n.clone();
    let d = dict.clone();
    let ctrl = move |x: &DVector<T>| {
        let z = d.lift(x);
        &k * &z + u_n(&z)
    };
    let x0s = sphere_points(plant.n, &run.radii, run.directions, run.seed);
    let finals: Vec<Result<f64, PlantError>> = x0s
        .par_iter()
        .map(|x0| {
            let x0 = x0.map(T::lit);
            let tr = simulate(plant, &ctrl, &DisturbanceModel::None, &x0, run.t_end, run.h)?;
            Ok(tr.final_state().norm().to_f64_lossy())
        })
        .collect();
    let mut worst = f64::NEG_INFINITY;
    let mut violations = 0;
    let mut details = Vec::new();
    for (x0, f) in x0s.iter().zip(finals) {
        let f = match f {
            Ok(v) => v,
            Err(PlantError::IntegrationDiverged { .. }) => f64::INFINITY,
            Err(e) => return Err(e.into()),
        };
        worst = worst.max(f);
        if !(f <= run.tol) {
            violations += 1;
            details.push(format!("x0 = {:?}: |x(T)| = {f:e}", x0.as_slice()));
        }
    }
    Ok(CheckReport::sampled(
        &format!("perturbed ({})", pert.name),
        worst,
        x0s.len(),
        violations,
        details,
    ))
}

/// Models `[A B₀ B₁] = Ẑᵀ − D₀W₀ᵀ𝐀⁻¹` produced by sampled disturbance
/// records `D₀ = Δ·G`, `‖G‖ ≤ 1` (half the samples on `‖G‖ = 1`), with the
/// nominal inequality evaluated at each.
pub fn disturbance_sweep<T: Real>(
    cert: &ControllerCert<T>,
    ds: &crate::consistency::Dataset<T>,
    n_samples: usize,
    seed: u64,
    margin: f64,
) -> Result<CheckReport, VerifyError> {
    let m = ds.input_dim();
    let w0 = ds.w0().map(|v| v.to_f64_lossy());
    let a = SymMatrix::symmetrize(&w0 * w0.transpose());
    let a_inv = pd_inverse(&a)?.into_inner();
    let w_pinv_t = w0.transpose() * a_inv;
    let delta = ds.delta.map(|v| v.to_f64_lossy());
    let z1 = ds.z1.map(|v| v.to_f64_lossy());
    let zhat_t = &z1 * &w_pinv_t;
    let mu = Multipliers::of(cert);
    let t = ds.len();
    let eval = |stack_t: &DMatrix<f64>| -> Result<f64, VerifyError> {
        let model = LiftedBilinearModel::from_stacked_transpose(
            &stack_t.map(T::lit),
            m,
            crate::edmd::ModelSource::Identified,
        );
        Ok(lam_max(nominal_matrix(&cert.p, &cert.l, &model, &mu)?))
    };
    let center = eval(&zhat_t)?;
    let values: Vec<Result<f64, VerifyError>> = (0..n_samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let g = DMatrix::<f64>::from_fn(delta.ncols(), t, |_, _| rng.sample(StandardNormal));
            let s = spectral_norm(&g);
            let r = if k % 2 == 0 { 1.0 } else { rng.random::<f64>() };
            let d0 = &delta * g * (r / s);
            eval(&(&zhat_t - d0 * &w_pinv_t))
        })
        .collect();
    let mut all = vec![center];
    for v in values {
        all.push(v?);
    }
    let violations = all.iter().filter(|v| !(**v <= -margin)).count();
    let worst = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut r = CheckReport::sampled(
        "disturbance sweep",
        worst,
        all.len(),
        violations,
        Vec::new(),
    );
    r.required_margin = margin;
    Ok(r)
}

/// Closed-loop runs from points on the boundary of a 2-D box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosedLoopSpec {
    pub half_width: f64,
    pub points: usize,
    pub t_end: f64,
    #[serde(default = "default_h")]
    pub h: f64,
    pub tol: f64,
    pub disturbance: DisturbanceModel,
}

fn default_h() -> f64 {
    1e-3
}

impl ClosedLoopSpec {
    pub fn initial_points(&self) -> Vec<DVector<f64>> {
        crate::plant::BoxDomain::cube(2, -self.half_width, self.half_width)
            .boundary_points_2d(self.points)
            .into_iter()
            .map(|p| DVector::from_vec(p.to_vec()))
            .collect()
    }
}

/// Simulates `u = KΨ(x)` from every initial point and requires
/// `‖x(t_end)‖ ≤ tol`. Diverged runs count as failures and return no
/// trajectory.
pub fn closed_loop_check<T: Real>(
    cert: &ControllerCert<T>,
    plant: &ControlAffinePlant<T>,
    dict: &Dictionary<T>,
    spec: &ClosedLoopSpec,
) -> Result<(CheckReport, Vec<Option<Trajectory<T>>>), VerifyError> {
    if plant.n != 2 {
        return Err(VerifyError::Unsupported(plant.n));
    }
    let ctrl = crate::synthesis::controller_from(cert, dict);
    let x0s = spec.initial_points();
    let runs: Vec<Result<Trajectory<T>, PlantError>> = x0s
        .par_iter()
        .map(|x0| {
            simulate(
                plant,
                &ctrl,
                &spec.disturbance,
                &x0.map(T::lit),
                spec.t_end,
                spec.h,
            )
        })
        .collect();
    let mut worst = f64::NEG_INFINITY;
    let mut violations = 0;
    let mut details = Vec::new();
    let mut trajs = Vec::new();
    for (x0, r) in x0s.iter().zip(runs) {
        let (f, tr) = match r {
            Ok(tr) => (tr.final_state().norm().to_f64_lossy(), Some(tr)),
            Err(PlantError::IntegrationDiverged { .. }) => (f64::INFINITY, None),
            Err(e) => return Err(e.into()),
        };
        worst = worst.max(f);
        if !(f <= spec.tol) {
            violations += 1;
            details.push(format!("x0 = ({:.3}, {:.3}): |x(T)| = {f:e}", x0[0], x0[1]));
        }
        trajs.push(tr);
    }
    let name = match spec.disturbance.energy() {
        0.0 => format!("closed loop on boundary of [-{0}, {0}]^2", spec.half_width),
        d => format!(
            "closed loop on boundary of [-{0}, {0}]^2, delta {d}",
            spec.half_width
        ),
    };
    Ok((
        CheckReport::sampled(&name, worst, x0s.len(), violations, details),
        trajs,
    ))
}
