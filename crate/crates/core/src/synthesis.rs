//! Controller synthesis from data (direct route) or from an identified
//! model (indirect route), with a line search over `ν`.
//!
//! Both routes solve one affine matrix inequality per `ν` in the decision
//! variables `P`, `L`, `τ` and `μ̃ = 1/μ`; every `μ⁻¹` in the inequalities
//! becomes the linear `μ̃`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::{ConsistencyError, ConsistencySet, Dataset};
use crate::edmd::{identify, EdmdError, ErrorBound, LiftedBilinearModel};
use crate::io::{IoError, MatrixJson};
use crate::lifting::Dictionary;
use crate::linalg::{max_eig, pd_inverse, SymMatrix};
use crate::lmi::{
    scalar_of, solve_feasibility, AffineMatrixInequality, BlockBuilder, FeasibilityStatus, LinExpr,
    LmiError, SolverOptions, VariableSpec,
};
use crate::scalar::Real;
use crate::verify::{check_data_lmi, check_model_nmi, CheckReport, VerifyError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("only single-input synthesis is supported (m = {0})")]
    Unsupported(usize),
    #[error("no grid value of nu gave a feasible solution")]
    AllInfeasible { per_nu: Vec<NuReport> },
    #[error("solution violates P < rho/(mu nu) I (lambda_max(P) = {p_max:e}, limit {limit:e})")]
    SideConditionViolated { p_max: f64, limit: f64 },
    #[error("solution failed independent certification: {0}")]
    CertificationFailed(String),
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
    #[error(transparent)]
    Edmd(#[from] EdmdError),
    #[error(transparent)]
    Lmi(#[from] LmiError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Direct,
    Indirect,
}

impl std::fmt::Display for Route {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Route::Direct => "direct",
            Route::Indirect => "indirect",
        })
    }
}

/// How the `ν` grid is searched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuSearch {
    /// Lowest grid index that is feasible.
    FirstFeasible,
    /// Feasible grid point with the largest margin.
    BestMargin,
}

/// `n` log-spaced points in `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp())
        .collect()
}

/// 25 log-spaced values in `[10⁻², 10³]`.
pub fn default_nu_grid() -> Vec<f64> {
    log_grid(1e-2, 1e3, 25)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    pub route: Route,
    pub alpha: f64,
    pub beta: f64,
    /// Level of the certified sublevel set `zᵀP⁻¹z ≤ c`.
    pub c: f64,
    pub nu_grid: Vec<f64>,
    pub bounds: ErrorBound,
    pub margin: f64,
    pub search: NuSearch,
    /// Strict lower bound on `λ_min(P)`.
    pub p_min_eig: f64,
    /// Optional strict upper bound on `λ_max(P)`.
    pub p_max_eig: Option<f64>,
    pub solver: SolverOptions,
}

impl SynthesisConfig {
    pub fn new(route: Route, alpha: f64, beta: f64, c: f64, bounds: ErrorBound) -> Self {
        Self {
            route,
            alpha,
            beta,
            c,
            nu_grid: default_nu_grid(),
            bounds,
            margin: 1e-8,
            search: NuSearch::FirstFeasible,
            p_min_eig: 1e-6,
            p_max_eig: None,
            solver: SolverOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |s: &str| Err(SynthError::InvalidConfig(s.to_string()));
        if !(self.alpha > 1.0 && self.beta > 1.0) {
            return bad("alpha and beta must exceed 1");
        }
        if (1.0 / self.alpha + 1.0 / self.beta - 1.0).abs() > 1e-12 {
            return bad("1/alpha + 1/beta must equal 1");
        }
        if !(self.c > 0.0) {
            return bad("c must be positive");
        }
        if self.nu_grid.is_empty() || self.nu_grid.iter().any(|v| !(*v > 0.0)) {
            return bad("nu grid must be nonempty and positive");
        }
        if self.bounds.c1 < 0.0 || self.bounds.c2 < 0.0 {
            return bad("error bounds must be nonnegative");
        }
        if !(self.margin >= 0.0) || !(self.p_min_eig >= 0.0) {
            return bad("margin and p_min_eig must be nonnegative");
        }
        if let Some(k) = self.p_max_eig {
            if !(k > self.p_min_eig) {
                return bad("p_max_eig must exceed p_min_eig");
            }
        }
        Ok(())
    }
}

/// Synthesized controller `u = Kz` with `K = LᵀP⁻¹` and the multipliers
/// that certify it.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerCert<T: Real> {
    pub route: Route,
    pub p: DMatrix<T>,
    pub l: DMatrix<T>,
    pub k: DMatrix<T>,
    pub alpha: f64,
    pub beta: f64,
    pub c: f64,
    pub nu: f64,
    pub tau: f64,
    pub mu: f64,
    /// Margin reported by the route's own check (negative is good).
    pub margin: f64,
    pub bounds: ErrorBound,
    pub dataset_fingerprint: String,
}

impl<T: Real> ControllerCert<T> {
    /// Builds a certificate from `(P, L)`; `K` is recomputed.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        route: Route,
        p: DMatrix<T>,
        l: DMatrix<T>,
        alpha: f64,
        beta: f64,
        c: f64,
        nu: f64,
        tau: f64,
        mu: f64,
        bounds: ErrorBound,
    ) -> Result<Self, SynthError> {
        let pinv = pd_inverse(&SymMatrix::symmetrize(p.clone()))
            .map_err(|e| SynthError::CertificationFailed(e.to_string()))?;
        let k = l.transpose() * pinv.as_matrix();
        Ok(Self {
            route,
            p,
            l,
            k,
            alpha,
            beta,
            c,
            nu,
            tau,
            mu,
            margin: f64::NAN,
            bounds,
            dataset_fingerprint: String::new(),
        })
    }

    pub fn lifted_dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.l.ncols()
    }

    pub fn mu_inv(&self) -> f64 {
        1.0 / self.mu
    }

    /// `u = Kz`.
    pub fn control(&self, z: &DVector<T>) -> DVector<T> {
        &self.k * z
    }

    pub fn to_json(&self) -> CertJson {
        CertJson {
            route: self.route,
            n_lift: self.lifted_dim(),
            m: self.input_dim(),
            p: MatrixJson::from_matrix(&self.p),
            l: MatrixJson::from_matrix(&self.l),
            k: MatrixJson::from_matrix(&self.k),
            alpha: self.alpha,
            beta: self.beta,
            c: self.c,
            nu: self.nu,
            tau: self.tau,
            mu: self.mu,
            margin: self.margin,
            c1: self.bounds.c1,
            c2: self.bounds.c2,
            dataset_fingerprint: self.dataset_fingerprint.clone(),
        }
    }

    /// Reloads a certificate; `K` is taken from the file as written.
    pub fn from_json(j: &CertJson) -> Result<Self, IoError> {
        let p = j.p.to_matrix("P")?;
        let l = j.l.to_matrix("L")?;
        let k = j.k.to_matrix("K")?;
        if p.shape() != (j.n_lift, j.n_lift)
            || l.shape() != (j.n_lift, j.m)
            || k.shape() != (j.m, j.n_lift)
        {
            return Err(IoError::Invalid("certificate dimensions disagree".into()));
        }
        Ok(Self {
            route: j.route,
            p,
            l,
            k,
            alpha: j.alpha,
            beta: j.beta,
            c: j.c,
            nu: j.nu,
            tau: j.tau,
            mu: j.mu,
            margin: j.margin,
            bounds: ErrorBound { c1: j.c1, c2: j.c2 },
            dataset_fingerprint: j.dataset_fingerprint.clone(),
        })
    }
}

/// Certificate file layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertJson {
    pub route: Route,
    #[serde(rename = "N")]
    pub n_lift: usize,
    pub m: usize,
    #[serde(rename = "P")]
    pub p: MatrixJson,
    #[serde(rename = "L")]
    pub l: MatrixJson,
    #[serde(rename = "K")]
    pub k: MatrixJson,
    pub alpha: f64,
    pub beta: f64,
    pub c: f64,
    pub nu: f64,
    pub tau: f64,
    pub mu: f64,
    pub margin: f64,
    pub c1: f64,
    pub c2: f64,
    pub dataset_fingerprint: String,
}

/// Outcome of one `ν` grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuReport {
    pub nu: f64,
    pub status: FeasibilityStatus,
    pub t_star: f64,
}

#[derive(Debug, Clone)]
pub struct SynthesisOutcome<T: Real> {
    pub cert: ControllerCert<T>,
    pub per_nu: Vec<NuReport>,
    pub check: CheckReport,
    /// Facts about the data worth surfacing (e.g. an indefinite `𝐐`).
    pub diagnostics: Vec<String>,
}

fn decision_vars(n: usize, m: usize, cfg: &SynthesisConfig) -> Vec<VariableSpec> {
    let mut p = VariableSpec::symmetric("P", n).min_eig(cfg.p_min_eig);
    if let Some(k) = cfg.p_max_eig {
        p = p.max_eig(k);
    }
    vec![
        p,
        VariableSpec::matrix("L", n, m),
        VariableSpec::scalar("tau").lower(0.0),
        VariableSpec::scalar("mu_inv").lower(0.0),
    ]
}

/// Sizes and entries of the `E₁₂`/`E₂₂` columns shared by both routes:
/// `[L P L]` against `diag(−ν/c, −τ/(αc₁²)I, −τ/(βc₂²))`. Columns whose
/// bound is zero vanish.
fn append_error_blocks<T: Real>(
    sizes: &mut Vec<usize>,
    n: usize,
    cfg: &SynthesisConfig,
    nu: f64,
) -> Vec<(usize, LinExpr<T>, LinExpr<T>)> {
    let mut out = Vec::new();
    let mut push = |sizes: &mut Vec<usize>, k: usize, top: LinExpr<T>, diag: LinExpr<T>| {
        sizes.push(k);
        out.push((sizes.len() - 1, top, diag));
    };
    push(
        sizes,
        1,
        LinExpr::var("L"),
        LinExpr::constant(DMatrix::from_element(1, 1, T::lit(-nu / cfg.c))),
    );
    let (c1, c2) = (cfg.bounds.c1, cfg.bounds.c2);
    if c1 > 0.0 {
        let s = -1.0 / (cfg.alpha * c1 * c1);
        push(
            sizes,
            n,
            LinExpr::var("P"),
            LinExpr::var("tau").lmul(&(DMatrix::identity(n, n) * T::lit(s))),
        );
    }
    if c2 > 0.0 {
        let s = -1.0 / (cfg.beta * c2 * c2);
        push(
            sizes,
            1,
            LinExpr::var("L"),
            LinExpr::var("tau").lmul(&DMatrix::from_element(1, 1, T::lit(s))),
        );
    }
    out
}

/// The data-based inequality in `(P, L, τ, μ̃)` for fixed `ν`.
pub fn assemble_direct_lmi<T: Real>(
    cs: &ConsistencySet<T>,
    cfg: &SynthesisConfig,
    nu: f64,
) -> Result<(Vec<VariableSpec>, Vec<AffineMatrixInequality<T>>), SynthError> {
    let (n, m) = (cs.n_lift, cs.m);
    if m != 1 {
        return Err(SynthError::Unsupported(m));
    }
    let p = n + m + n * m;
    let id = DMatrix::<T>::identity(n, n);
    // selectors placing P, Lᵀ and the B₁ slot inside a p-row block
    let mut sel_p = DMatrix::<T>::zeros(p, n);
    sel_p.view_mut((0, 0), (n, n)).fill_with_identity();
    let mut sel_l = DMatrix::<T>::zeros(p, m);
    sel_l[(n, 0)] = T::one();
    let mut sel_v = DMatrix::<T>::zeros(p, n);
    sel_v.view_mut((n + m, 0), (n, n)).fill_with_identity();

    let mut sizes = vec![n, n, p];
    let err = append_error_blocks::<T>(&mut sizes, n, cfg, nu);
    let mut b = BlockBuilder::new("direct", sizes);
    b.set(
        0,
        0,
        LinExpr::var("mu_inv")
            .lmul(&-cs.c.as_matrix().clone())
            .plus(LinExpr::var("tau").lmul(&id)),
    );
    b.set(1, 1, LinExpr::var("P").scale(T::lit(-1.0 / nu)));
    b.set(
        2,
        0,
        LinExpr::var("P")
            .lmul(&sel_p)
            .plus(LinExpr::var_t("L").lmul(&sel_l))
            .minus(LinExpr::var("mu_inv").lmul(&cs.b)),
    );
    b.set(2, 1, LinExpr::var("P").lmul(&sel_v).neg());
    b.set(
        2,
        2,
        LinExpr::var("mu_inv").lmul(&-cs.a.as_matrix().clone()),
    );
    for (k, top, diag) in err {
        b.set(0, k, top);
        b.set(k, k, diag);
    }
    let vars = decision_vars(n, m, cfg);
    let lmi = b.build(&vars, true)?;
    Ok((vars, vec![lmi]))
}

/// The model-based inequality in `(P, L, τ, μ̃)` for fixed `ν`, plus the
/// affine side constraint `νP − ρμ̃I ≺ 0`.
pub fn assemble_indirect_lmi<T: Real>(
    model: &LiftedBilinearModel<T>,
    delta: &DMatrix<T>,
    rho: f64,
    cfg: &SynthesisConfig,
    nu: f64,
) -> Result<(Vec<VariableSpec>, Vec<AffineMatrixInequality<T>>), SynthError> {
    let (n, m) = (model.lifted_dim(), model.input_dim());
    if m != 1 {
        return Err(SynthError::Unsupported(m));
    }
    let id = DMatrix::<T>::identity(n, n);
    let rho_t = T::lit(rho);
    let dd = delta * delta.transpose();
    let mut sizes = vec![n, n, n, n, 1];
    let err = append_error_blocks::<T>(&mut sizes, n, cfg, nu);
    let mut b = BlockBuilder::new("indirect", sizes);
    let e11 = LinExpr::var("P")
        .lmul(&model.a)
        .sym()
        .plus(LinExpr::var("L").rmul(&model.b0.transpose()).sym())
        .plus(LinExpr::var("tau").lmul(&id))
        .plus(LinExpr::var("mu_inv").lmul(&dd));
    b.set(0, 0, e11);
    b.set(0, 2, LinExpr::var("P").lmul(&model.b[0]).neg());
    b.set(0, 3, LinExpr::var("P").neg());
    b.set(0, 4, LinExpr::var("L").neg());
    b.set(1, 1, LinExpr::var("mu_inv").lmul(&(&id * -rho_t)));
    b.set(1, 2, LinExpr::var("P"));
    b.set(2, 2, LinExpr::var("P").scale(T::lit(-1.0 / nu)));
    b.set(3, 3, LinExpr::var("mu_inv").lmul(&(&id * -rho_t)));
    b.set(
        4,
        4,
        LinExpr::var("mu_inv").lmul(&DMatrix::from_element(1, 1, -rho_t)),
    );
    for (k, top, diag) in err {
        b.set(0, k, top);
        b.set(k, k, diag);
    }
    let vars = decision_vars(n, m, cfg);
    let main = b.build(&vars, true)?;
    let mut side = BlockBuilder::new("side", vec![n]);
    side.set(
        0,
        0,
        LinExpr::var("P")
            .scale(T::lit(nu))
            .minus(LinExpr::var("mu_inv").lmul(&(&id * rho_t))),
    );
    let side = side.build(&vars, true)?;
    Ok((vars, vec![main, side]))
}

struct GridSolution<T: Real> {
    report: NuReport,
    assignment: Option<crate::lmi::Assignment<T>>,
}

fn line_search<T: Real, F>(
    cfg: &SynthesisConfig,
    assemble: F,
) -> Result<(Vec<NuReport>, usize, crate::lmi::Assignment<T>), SynthError>
where
    F: Fn(f64) -> Result<(Vec<VariableSpec>, Vec<AffineMatrixInequality<T>>), SynthError> + Sync,
{
    let results: Vec<Result<GridSolution<T>, SynthError>> = cfg
        .nu_grid
        .par_iter()
        .map(|&nu| {
            let (vars, cons) = assemble(nu)?;
            let r = solve_feasibility(&vars, &cons, cfg.margin, &cfg.solver)?;
            Ok(GridSolution {
                report: NuReport {
                    nu,
                    status: r.status,
                    t_star: r.t_star,
                },
                assignment: (r.status == FeasibilityStatus::Feasible).then_some(r.assignment),
            })
        })
        .collect();
    let mut sols = Vec::with_capacity(results.len());
    for r in results {
        sols.push(r?);
    }
    let per_nu: Vec<NuReport> = sols.iter().map(|s| s.report.clone()).collect();
    let feasible = sols
        .iter()
        .enumerate()
        .filter(|(_, s)| s.assignment.is_some());
    let pick = match cfg.search {
        NuSearch::FirstFeasible => feasible.map(|(i, _)| i).next(),
        NuSearch::BestMargin => feasible
            .max_by(|a, b| {
                a.1.report
                    .t_star
                    .partial_cmp(&b.1.report.t_star)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    // ties go to the lower index
                    .then(b.0.cmp(&a.0))
            })
            .map(|(i, _)| i),
    };
    match pick {
        Some(i) => {
            let a = sols
                .swap_remove(i)
                .assignment
                .expect("picked a feasible point");
            Ok((per_nu, i, a))
        }
        None => Err(SynthError::AllInfeasible { per_nu }),
    }
}

fn cert_from_assignment<T: Real>(
    route: Route,
    a: &crate::lmi::Assignment<T>,
    cfg: &SynthesisConfig,
    nu: f64,
) -> Result<ControllerCert<T>, SynthError> {
    let tau = scalar_of(a, "tau").expect("tau").to_f64_lossy();
    let mu_inv = scalar_of(a, "mu_inv").expect("mu_inv").to_f64_lossy();
    ControllerCert::from_parts(
        route,
        a["P"].clone(),
        a["L"].clone(),
        cfg.alpha,
        cfg.beta,
        cfg.c,
        nu,
        tau,
        1.0 / mu_inv,
        cfg.bounds,
    )
}

/// Direct route: consistency set from data, `ν` line search, certificate
/// re-checked against the assembled data inequality.
pub fn synth_direct<T: Real>(
    ds: &Dataset<T>,
    cfg: &SynthesisConfig,
) -> Result<SynthesisOutcome<T>, SynthError> {
    cfg.validate()?;
    if ds.input_dim() != 1 {
        return Err(SynthError::Unsupported(ds.input_dim()));
    }
    let cs = ConsistencySet::build(ds)?;
    let mut diagnostics = Vec::new();
    if cs.is_empty() {
        diagnostics.push(format!(
            "Q is indefinite (min eigenvalue {:e}, max {:e}): the disturbance bound does not cover the data residual, so the consistency set is empty",
            cs.q_min_eig.to_f64_lossy(),
            cs.q_max_eig.to_f64_lossy()
        ));
    }
    let (per_nu, i, a) = line_search(cfg, |nu| assemble_direct_lmi(&cs, cfg, nu))?;
    let nu = cfg.nu_grid[i];
    let mut cert = cert_from_assignment(Route::Direct, &a, cfg, nu)?;
    cert.dataset_fingerprint = ds.fingerprint();
    let check = check_data_lmi(&cert, &cs, cfg.margin)?;
    if !check.pass {
        return Err(SynthError::CertificationFailed(format!(
            "direct check margin {:e}",
            check.margin
        )));
    }
    cert.margin = check.margin;
    Ok(SynthesisOutcome {
        cert,
        per_nu,
        check,
        diagnostics,
    })
}

/// Indirect route: least-squares model, `ρ = 1/λ_min(W₀W₀ᵀ)`, `ν` line
/// search, side condition and model inequality re-checked.
pub fn synth_indirect<T: Real>(
    ds: &Dataset<T>,
    cfg: &SynthesisConfig,
) -> Result<SynthesisOutcome<T>, SynthError> {
    cfg.validate()?;
    if ds.input_dim() != 1 {
        return Err(SynthError::Unsupported(ds.input_dim()));
    }
    let model = identify(ds)?;
    let rep = crate::consistency::build_w0(ds)?;
    let rho = 1.0 / rep.lambda_min.to_f64_lossy();
    synth_indirect_with_model(&model, &ds.delta, rho, &ds.fingerprint(), cfg)
}

/// Indirect route for a given model, `Δ` and `ρ`.
pub fn synth_indirect_with_model<T: Real>(
    model: &LiftedBilinearModel<T>,
    delta: &DMatrix<T>,
    rho: f64,
    fingerprint: &str,
    cfg: &SynthesisConfig,
) -> Result<SynthesisOutcome<T>, SynthError> {
    cfg.validate()?;
    let (per_nu, i, a) = line_search(cfg, |nu| assemble_indirect_lmi(model, delta, rho, cfg, nu))?;
    let nu = cfg.nu_grid[i];
    let mut cert = cert_from_assignment(Route::Indirect, &a, cfg, nu)?;
    cert.dataset_fingerprint = fingerprint.to_string();
    let p_max = max_eig(&SymMatrix::symmetrize(cert.p.clone())).to_f64_lossy();
    let limit = rho / (cert.mu * cert.nu);
    if !(p_max < limit) {
        return Err(SynthError::SideConditionViolated { p_max, limit });
    }
    let check = check_model_nmi(&cert, model, delta, rho, cfg.margin)?;
    if !check.pass {
        return Err(SynthError::CertificationFailed(format!(
            "indirect check margin {:e}",
            check.margin
        )));
    }
    cert.margin = check.margin;
    Ok(SynthesisOutcome {
        cert,
        per_nu,
        check,
        diagnostics: Vec::new(),
    })
}

/// `x ↦ K·Ψ(x)`.
pub fn controller_from<T: Real>(
    cert: &ControllerCert<T>,
    dict: &Dictionary<T>,
) -> impl Fn(&DVector<T>) -> DVector<T> + Send + Sync + Clone {
    let k = cert.k.clone();
    let d = dict.clone();
    move |x: &DVector<T>| &k * d.lift(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consistency::build_consistency;
    use crate::edmd::ModelSource;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(route: Route, c1: f64) -> SynthesisConfig {
        let mut c = SynthesisConfig::new(route, 2.0, 2.0, 1.0, ErrorBound { c1, c2: c1 });
        c.nu_grid = vec![0.1, 1.0, 10.0];
        c
    }

    /// Stable bilinear plant sampled noise-free (or with a bounded
    /// disturbance of energy `delta` per sample).
    fn dataset(t: usize, delta: f64, seed: u64) -> Dataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_row_slice(3, 3, &[-1.0, 0.5, 0.0, 0.0, -1.5, 0.2, 0.1, 0.0, -2.0]);
        let b0 = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.5]);
        let b1 = DMatrix::from_fn(3, 3, |i, j| 0.05 * (i as f64 - j as f64));
        let z0 = DMatrix::from_fn(3, t, |_, _| rng.random_range(-1.0..1.0));
        let u0 = DMatrix::from_fn(1, t, |_, _| rng.random_range(-1.0..1.0));
        let mut z1 = &a * &z0 + &b0 * &u0;
        for j in 0..t {
            let add = &b1 * z0.column(j) * u0[(0, j)];
            let mut c = z1.column_mut(j);
            c += add;
            let d: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let nd = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            for i in 0..3 {
                c[i] += delta.sqrt() * d[i] / nd * rng.random::<f64>();
            }
        }
        let dl = crate::consistency::delta_from_energy(t, delta, 3);
        Dataset::from_lifted(z0, u0, z1, dl, "synthetic").unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(Route::Direct, 0.1);
        assert!(c.validate().is_ok());
        c.beta = 3.0;
        assert!(c.validate().is_err());
        let mut c = cfg(Route::Direct, 0.1);
        c.alpha = 3.0;
        c.beta = 1.5;
        assert!(c.validate().is_ok());
        assert_eq!(default_nu_grid().len(), 25);
        assert!((default_nu_grid()[24] - 1e3).abs() < 1e-9);
    }

    #[test]
    fn direct_block_size() {
        let ds = dataset(60, 0.0, 1);
        let cs = ConsistencySet::build(&ds).unwrap();
        let (_, c) = assemble_direct_lmi(&cs, &cfg(Route::Direct, 0.1), 1.0).unwrap();
        // N + N + (N+m+Nm) + 1 + N + 1 with N = 3
        assert_eq!(c[0].size, 3 + 3 + 7 + 1 + 3 + 1);
        let (_, c) = assemble_direct_lmi(&cs, &cfg(Route::Direct, 0.0), 1.0).unwrap();
        assert_eq!(c[0].size, 3 + 3 + 7 + 1);
    }

    #[test]
    fn indirect_block_size() {
        let ds = dataset(60, 0.0, 1);
        let m = identify(&ds).unwrap();
        let (_, c) =
            assemble_indirect_lmi(&m, &ds.delta, 0.1, &cfg(Route::Indirect, 0.1), 1.0).unwrap();
        assert_eq!(c[0].size, 4 * 3 + 1 + 1 + 3 + 1);
        assert_eq!(c[1].size, 3);
    }

    #[test]
    fn direct_noise_free_is_feasible_and_certified() {
        let ds = dataset(80, 0.0, 2);
        let out = synth_direct(&ds, &cfg(Route::Direct, 0.0)).unwrap();
        assert!(out.check.pass);
        assert!(out.cert.margin <= -1e-8);
        let kp = &out.cert.k * &out.cert.p;
        assert!((kp - out.cert.l.transpose()).abs().max() < 1e-10);
    }

    #[test]
    fn direct_with_disturbance() {
        let ds = dataset(200, 1e-4, 3);
        let cs = build_consistency(&ds).unwrap();
        assert!(!cs.is_empty());
        let out = synth_direct(&ds, &cfg(Route::Direct, 0.05)).unwrap();
        assert!(out.check.pass);
    }

    #[test]
    fn indirect_is_feasible_and_respects_side_condition() {
        let ds = dataset(200, 1e-4, 4);
        let out = synth_indirect(&ds, &cfg(Route::Indirect, 0.05)).unwrap();
        assert!(out.check.pass);
        assert_eq!(out.cert.route, Route::Indirect);
    }

    #[test]
    fn huge_delta_is_infeasible() {
        let ds = dataset(200, 1e-4, 5);
        let big = ds.delta.clone() * 1e6;
        let ds = ds.with_delta(big);
        let mut c = cfg(Route::Direct, 0.05);
        c.nu_grid = vec![1.0, 10.0];
        assert!(matches!(
            synth_direct(&ds, &c),
            Err(SynthError::AllInfeasible { .. })
        ));
    }

    #[test]
    fn multi_input_is_unsupported() {
        let z = DMatrix::from_fn(2, 30, |i, j| ((i + 1) * (j + 3)) as f64 % 7.0 - 3.0);
        let u = DMatrix::from_fn(2, 30, |i, j| ((i + 2) * (j + 1)) as f64 % 5.0 - 2.0);
        let ds = Dataset::from_lifted(z.clone(), u, z, DMatrix::zeros(2, 2), "x").unwrap();
        assert!(matches!(
            synth_direct(&ds, &cfg(Route::Direct, 0.0)),
            Err(SynthError::Unsupported(2))
        ));
        let m = LiftedBilinearModel::<f64>::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
            vec![DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)],
            ModelSource::GroundTruth,
        )
        .unwrap();
        assert!(matches!(
            assemble_indirect_lmi(
                &m,
                &DMatrix::zeros(2, 2),
                1.0,
                &cfg(Route::Indirect, 0.0),
                1.0
            ),
            Err(SynthError::Unsupported(2))
        ));
    }

    #[test]
    fn controller_examples() {
        let d = crate::lifting::pendulum_dictionary::<f64>();
        let p = DMatrix::identity(4, 4);
        let zero = ControllerCert::from_parts(
            Route::Direct,
            p.clone(),
            DMatrix::zeros(4, 1),
            2.0,
            2.0,
            1.0,
            1.0,
            1.0,
            1.0,
            ErrorBound { c1: 0.0, c2: 0.0 },
        )
        .unwrap();
        let u = controller_from(&zero, &d);
        assert_eq!(u(&DVector::from_vec(vec![1.0, 2.0]))[0], 0.0);
        let l = DMatrix::from_column_slice(4, 1, &[1.0, -2.0, 0.5, 3.0]);
        let p2 = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0, 4.0, 0.5]));
        let cert = ControllerCert::from_parts(
            Route::Direct,
            p2.clone(),
            l.clone(),
            2.0,
            2.0,
            1.0,
            1.0,
            1.0,
            1.0,
            ErrorBound { c1: 0.0, c2: 0.0 },
        )
        .unwrap();
        let u = controller_from(&cert, &d);
        assert_eq!(u(&DVector::zeros(2))[0], 0.0);
        let x = DVector::from_vec(vec![0.3, -0.7]);
        let k = l.transpose() * p2.try_inverse().unwrap();
        assert!(((&k * d.lift(&x))[0] - u(&x)[0]).abs() < 1e-12);
    }

    #[test]
    fn cert_json_round_trip() {
        let ds = dataset(80, 0.0, 6);
        let out = synth_direct(&ds, &cfg(Route::Direct, 0.0)).unwrap();
        let s = serde_json::to_string(&out.cert.to_json()).unwrap();
        for key in [
            "\"route\"",
            "\"N\"",
            "\"P\"",
            "\"K\"",
            "\"mu\"",
            "\"dataset_fingerprint\"",
        ] {
            assert!(s.contains(key));
        }
        let back = ControllerCert::<f64>::from_json(&serde_json::from_str(&s).unwrap()).unwrap();
        assert_eq!(back, out.cert);
    }
}
