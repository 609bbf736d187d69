//! Run configuration, the shipped presets and the pipeline steps shared
//! by the command-line driver and the test suites.

use std::path::PathBuf;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::{build_w0, ConsistencyError, ConsistencySet, Dataset};
use crate::edmd::{estimate_error_bounds, identify, EdmdError, ErrorBound, LiftedBilinearModel};
use crate::lifting::{Dictionary, DictionaryError, DictionarySpec};
use crate::plant::{
    collect_dataset, make_pendulum, BoxDomain, ControlAffinePlant, DisturbanceModel, InputSchedule,
    PlantError, SamplingSpec,
};
use crate::scalar::Real;
use crate::synthesis::ControllerCert;
use crate::synthesis::{
    default_nu_grid, synth_direct, synth_indirect, NuSearch, Route, SynthError, SynthesisConfig,
    SynthesisOutcome,
};
use crate::verify::{
    check_data_lmi, check_model_nmi, closed_loop_check, disturbance_sweep, level_set_points,
    lyapunov_decrease, perturbed_controller_check, sweep_consistent_stability, CheckReport,
    ClosedLoopSpec, PerturbationSpec, PerturbedRun, VerifyError,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Dictionary(#[from] DictionaryError),
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
    #[error(transparent)]
    Edmd(#[from] EdmdError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlantSpec {
    Pendulum,
}

impl PlantSpec {
    pub fn build<T: Real>(&self) -> ControlAffinePlant<T> {
        match self {
            PlantSpec::Pendulum => make_pendulum(),
        }
    }
}

/// Residual bound `‖r‖ ≤ c₁‖z‖ + c₂‖u‖`: given, or fitted to the
/// least-squares residual of the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundsSpec {
    Fixed {
        c1: f64,
        c2: f64,
    },
    Fit {
        #[serde(default = "one")]
        safety: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub sampling: SamplingSpec,
    pub schedule: InputSchedule,
    pub disturbance: DisturbanceModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub route: Route,
    pub alpha: f64,
    pub beta: f64,
    pub c: f64,
    #[serde(default = "default_nu_grid")]
    pub nu_grid: Vec<f64>,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_search")]
    pub search: NuSearch,
    #[serde(default = "default_p_min")]
    pub p_min_eig: f64,
    #[serde(default)]
    pub p_max_eig: Option<f64>,
}

fn default_margin() -> f64 {
    1e-8
}

fn default_search() -> NuSearch {
    NuSearch::FirstFeasible
}

fn default_p_min() -> f64 {
    1e-6
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// The route's own matrix inequality.
    Certificate,
    /// Nominal inequality over sampled members of the consistency set.
    ConsistencySweep,
    /// Nominal inequality over models induced by sampled disturbance records.
    Petersen,
    ClosedLoop,
    Lyapunov,
    Perturbation,
}

impl Suite {
    pub fn all() -> Vec<Suite> {
        vec![
            Suite::Certificate,
            Suite::ConsistencySweep,
            Suite::Petersen,
            Suite::ClosedLoop,
            Suite::Lyapunov,
            Suite::Perturbation,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySpec {
    #[serde(default = "Suite::all")]
    pub suites: Vec<Suite>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "hundred")]
    pub sweep_samples: usize,
    #[serde(default = "fifty")]
    pub sweep_boundary: usize,
    #[serde(default)]
    pub closed_loop: Vec<ClosedLoopSpec>,
    #[serde(default)]
    pub perturbation: PerturbedRun,
}

fn hundred() -> usize {
    100
}

fn fifty() -> usize {
    50
}

impl Default for VerifySpec {
    fn default() -> Self {
        Self {
            suites: Suite::all(),
            seed: 0,
            sweep_samples: 100,
            sweep_boundary: 50,
            closed_loop: Vec::new(),
            perturbation: PerturbedRun::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub plant: PlantSpec,
    pub dictionary: DictionarySpec,
    pub data: DataSpec,
    pub bounds: BoundsSpec,
    pub synthesis: SynthSection,
    #[serde(default)]
    pub verify: VerifySpec,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// A direct and an indirect run checked against each other.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossConfig {
    pub direct: RunConfig,
    pub indirect: RunConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |s: String| Err(ExperimentError::Config(s));
        let dict = self.dictionary.build::<f64>()?;
        let plant = self.plant.build::<f64>();
        if dict.state_dim() != plant.n {
            return bad(format!(
                "dictionary acts on {} states but the plant has {}",
                dict.state_dim(),
                plant.n
            ));
        }
        match &self.data.sampling {
            SamplingSpec::IidStates {
                domain,
                samples,
                dt,
                ..
            } => {
                if domain.dim() != plant.n
                    || domain.lo.iter().zip(&domain.hi).any(|(l, h)| !(l < h))
                {
                    return bad(
                        "data.sampling.domain must be a nonempty box of the state dimension".into(),
                    );
                }
                if *samples == 0 || !(*dt > 0.0) {
                    return bad("data.sampling needs samples > 0 and dt > 0".into());
                }
            }
            SamplingSpec::Trajectory { x0, samples, dt, h } => {
                if x0.len() != plant.n {
                    return bad(format!(
                        "data.sampling.x0 has {} entries, expected {}",
                        x0.len(),
                        plant.n
                    ));
                }
                if *samples == 0 || !(*dt > 0.0) || !(*h > 0.0) {
                    return bad("data.sampling needs samples > 0, dt > 0 and h > 0".into());
                }
            }
        }
        if !(self.data.disturbance.energy() >= 0.0) {
            return bad("data.disturbance.delta must be nonnegative".into());
        }
        match self.bounds {
            BoundsSpec::Fixed { c1, c2 } if !(c1 >= 0.0 && c2 >= 0.0) => {
                return bad("bounds.c1 and bounds.c2 must be nonnegative".into())
            }
            BoundsSpec::Fit { safety } if !(safety >= 1.0) => {
                return bad("bounds.safety must be at least 1".into())
            }
            _ => {}
        }
        self.synthesis_config(ErrorBound { c1: 0.0, c2: 0.0 })
            .validate()
            .map_err(|e| ExperimentError::Config(format!("synthesis: {e}")))?;
        for cl in &self.verify.closed_loop {
            if !(cl.half_width > 0.0 && cl.t_end > 0.0 && cl.tol > 0.0 && cl.h > 0.0)
                || cl.points == 0
            {
                return bad(
                    "verify.closed_loop entries need positive half_width, points, t_end, h and tol"
                        .into(),
                );
            }
        }
        if self.verify.sweep_boundary > self.verify.sweep_samples {
            return bad("verify.sweep_boundary cannot exceed verify.sweep_samples".into());
        }
        Ok(())
    }

    pub fn synthesis_config(&self, bounds: ErrorBound) -> SynthesisConfig {
        let s = &self.synthesis;
        let mut cfg = SynthesisConfig::new(s.route, s.alpha, s.beta, s.c, bounds);
        cfg.nu_grid = s.nu_grid.clone();
        cfg.margin = s.margin;
        cfg.search = s.search;
        cfg.p_min_eig = s.p_min_eig;
        cfg.p_max_eig = s.p_max_eig;
        cfg
    }

    /// Replaces every seed in the configuration.
    pub fn with_seed(mut self, seed: u64) -> Self {
        if let SamplingSpec::IidStates { seed: s, .. } = &mut self.data.sampling {
            *s = seed;
        }
        if let DisturbanceModel::BoundedRandom { seed: s, .. } = &mut self.data.disturbance {
            *s = seed;
        }
        self.verify.seed = seed;
        self.verify.perturbation.seed = seed;
        self
    }

    pub fn dictionary<T: Real>(&self) -> Result<Dictionary<T>, ExperimentError> {
        Ok(self.dictionary.build()?)
    }
}

pub const PRESET_NAMES: [&str; 3] = ["pendulum-direct", "pendulum-indirect", "pendulum"];

/// Upper bound on `λ_max(P)` used by the pendulum presets. It keeps `P` at
/// the scale of known working certificates; without it the margin is
/// maximized by letting `P` grow with `L → 0`.
pub const PENDULUM_P_MAX: f64 = 0.1;

/// Direct design on iid samples from `[−2, 10]²` under zero and unit inputs.
pub fn pendulum_direct() -> RunConfig {
    RunConfig {
        name: "pendulum-direct".into(),
        plant: PlantSpec::Pendulum,
        dictionary: DictionarySpec::Pendulum,
        data: DataSpec {
            sampling: SamplingSpec::IidStates {
                domain: BoxDomain::cube(2, -2.0, 10.0),
                samples: 1000,
                seed: 0,
                dt: 0.01,
            },
            schedule: InputSchedule::ZeroAndUnits,
            disturbance: DisturbanceModel::sinusoidal(0.01),
        },
        bounds: BoundsSpec::Fixed { c1: 0.1, c2: 0.1 },
        synthesis: SynthSection {
            route: Route::Direct,
            alpha: 3.0,
            beta: 1.5,
            c: 5.0,
            nu_grid: vec![10.0],
            margin: 1e-8,
            search: NuSearch::FirstFeasible,
            p_min_eig: 1e-6,
            p_max_eig: Some(PENDULUM_P_MAX),
        },
        verify: VerifySpec {
            closed_loop: vec![
                ClosedLoopSpec {
                    half_width: 2.0,
                    points: 8,
                    t_end: 20.0,
                    h: 1e-3,
                    tol: 1e-3,
                    disturbance: DisturbanceModel::None,
                },
                ClosedLoopSpec {
                    half_width: 2.0,
                    points: 8,
                    t_end: 20.0,
                    h: 1e-3,
                    tol: 0.2,
                    disturbance: DisturbanceModel::sinusoidal(0.01),
                },
            ],
            perturbation: PerturbedRun {
                radii: vec![0.025, 0.05, 0.075, 0.1],
                directions: 4,
                ..PerturbedRun::default()
            },
            ..VerifySpec::default()
        },
        output_dir: None,
    }
}

/// Indirect design on one chirp-driven trajectory.
pub fn pendulum_indirect() -> RunConfig {
    let mut grid = default_nu_grid();
    grid.push(11.11);
    grid.sort_by(f64::total_cmp);
    RunConfig {
        name: "pendulum-indirect".into(),
        plant: PlantSpec::Pendulum,
        dictionary: DictionarySpec::Pendulum,
        data: DataSpec {
            sampling: SamplingSpec::Trajectory {
                x0: vec![0.5, -0.3],
                samples: 1000,
                dt: 0.01,
                h: 1e-3,
            },
            schedule: InputSchedule::default_chirp(10.0),
            disturbance: DisturbanceModel::sinusoidal(0.0005),
        },
        bounds: BoundsSpec::Fixed { c1: 0.1, c2: 0.1 },
        synthesis: SynthSection {
            route: Route::Indirect,
            alpha: 2.0,
            beta: 2.0,
            c: 5.0,
            nu_grid: grid,
            margin: 1e-8,
            search: NuSearch::FirstFeasible,
            p_min_eig: 1e-6,
            p_max_eig: Some(PENDULUM_P_MAX),
        },
        verify: VerifySpec {
            closed_loop: vec![ClosedLoopSpec {
                half_width: 6.0,
                points: 20,
                t_end: 30.0,
                h: 1e-3,
                tol: 0.05,
                disturbance: DisturbanceModel::sinusoidal(0.0005),
            }],
            ..VerifySpec::default()
        },
        output_dir: None,
    }
}

pub fn preset(name: &str) -> Option<RunConfig> {
    match name {
        "pendulum-direct" => Some(pendulum_direct()),
        "pendulum-indirect" => Some(pendulum_indirect()),
        _ => None,
    }
}

pub fn cross_preset(name: &str) -> Option<CrossConfig> {
    match name {
        "pendulum" => Some(CrossConfig {
            direct: pendulum_direct(),
            indirect: pendulum_indirect(),
        }),
        _ => None,
    }
}

pub fn collect<T: Real>(cfg: &RunConfig) -> Result<Dataset<T>, ExperimentError> {
    let plant = cfg.plant.build::<T>();
    let dict = cfg.dictionary::<T>()?;
    let mut ds = collect_dataset(
        &plant,
        &dict,
        &cfg.data.schedule,
        &cfg.data.disturbance,
        &cfg.data.sampling,
    )?;
    ds.provenance.source = cfg.name.clone();
    Ok(ds)
}

pub fn resolve_bounds<T: Real>(
    cfg: &RunConfig,
    ds: &Dataset<T>,
) -> Result<ErrorBound, ExperimentError> {
    Ok(match cfg.bounds {
        BoundsSpec::Fixed { c1, c2 } => ErrorBound { c1, c2 },
        BoundsSpec::Fit { safety } => estimate_error_bounds(ds, &identify(ds)?, safety)?,
    })
}

pub fn synthesize<T: Real>(
    cfg: &RunConfig,
    ds: &Dataset<T>,
) -> Result<SynthesisOutcome<T>, ExperimentError> {
    let sc = cfg.synthesis_config(resolve_bounds(cfg, ds)?);
    Ok(match sc.route {
        Route::Direct => synth_direct(ds, &sc)?,
        Route::Indirect => synth_indirect(ds, &sc)?,
    })
}

/// Identified model with `Δ` and `ρ = 1/λ_min(W₀W₀ᵀ)` for the model-based
/// check.
pub struct ModelContext<T: Real> {
    pub model: LiftedBilinearModel<T>,
    pub delta: DMatrix<T>,
    pub rho: f64,
}

impl<T: Real> ModelContext<T> {
    pub fn from_dataset(ds: &Dataset<T>) -> Result<Self, ExperimentError> {
        Ok(Self {
            model: identify(ds)?,
            delta: ds.delta.clone(),
            rho: 1.0 / build_w0(ds)?.lambda_min.to_f64_lossy(),
        })
    }
}

fn failed(name: &str, why: String) -> CheckReport {
    CheckReport {
        name: name.to_string(),
        pass: false,
        margin: f64::NAN,
        required_margin: 0.0,
        samples: 0,
        violations: 1,
        details: vec![why],
    }
}

/// Data-based check, reported as a failure (not an error) when it cannot
/// be evaluated.
pub fn data_lmi_report<T: Real>(
    cert: &ControllerCert<T>,
    ds: &Dataset<T>,
    margin: f64,
) -> Result<CheckReport, ExperimentError> {
    let cs = ConsistencySet::build(ds)?;
    Ok(match check_data_lmi(cert, &cs, margin) {
        Ok(r) => r,
        Err(e @ VerifyError::InvalidScalars(_)) => failed("data-based", e.to_string()),
        Err(e) => return Err(e.into()),
    })
}

/// Model-based check; a violated side condition is a failed report.
pub fn model_nmi_report<T: Real>(
    cert: &ControllerCert<T>,
    ctx: &ModelContext<T>,
    margin: f64,
) -> Result<CheckReport, ExperimentError> {
    Ok(
        match check_model_nmi(cert, &ctx.model, &ctx.delta, ctx.rho, margin) {
            Ok(r) => r,
            Err(
                e @ (VerifyError::SideConditionViolated { .. } | VerifyError::InvalidScalars(_)),
            ) => failed("model-based", e.to_string()),
            Err(e) => return Err(e.into()),
        },
    )
}

/// Runs the configured suites on `cert` against the data it was designed
/// from.
pub fn verify_certificate<T: Real>(
    cfg: &RunConfig,
    cert: &ControllerCert<T>,
    ds: &Dataset<T>,
) -> Result<Vec<CheckReport>, ExperimentError> {
    let plant = cfg.plant.build::<T>();
    let dict = cfg.dictionary::<T>()?;
    let v = &cfg.verify;
    let margin = cfg.synthesis.margin;
    let mut out = Vec::new();
    for suite in &v.suites {
        match suite {
            Suite::Certificate => out.push(match cert.route {
                Route::Direct => data_lmi_report(cert, ds, margin)?,
                Route::Indirect => {
                    model_nmi_report(cert, &ModelContext::from_dataset(ds)?, margin)?
                }
            }),
            Suite::ConsistencySweep => {
                let cs = ConsistencySet::build(ds)?;
                out.push(if cs.is_empty() {
                    failed(
                        "consistency sweep",
                        format!(
                            "consistency set is empty (Q has eigenvalue {:e})",
                            cs.q_min_eig.to_f64_lossy()
                        ),
                    )
                } else {
                    sweep_consistent_stability(
                        cert,
                        &cs,
                        v.sweep_samples,
                        v.sweep_boundary,
                        v.seed,
                        0.0,
                    )?
                });
            }
            Suite::Petersen => out.push(disturbance_sweep(cert, ds, v.sweep_samples, v.seed, 0.0)?),
            Suite::ClosedLoop => {
                for cl in &v.closed_loop {
                    out.push(closed_loop_check(cert, &plant, &dict, cl)?.0);
                }
            }
            Suite::Lyapunov => {
                let t_end = v.closed_loop.first().map_or(20.0, |cl| cl.t_end);
                out.push(lyapunov_from_level_set(cert, &plant, &dict, t_end)?);
            }
            Suite::Perturbation => {
                let pert = PerturbationSpec::cubic(cert.k.clone(), 0.1);
                out.push(
                    match perturbed_controller_check(cert, &plant, &dict, &pert, &v.perturbation) {
                        Ok(r) => r,
                        Err(e @ VerifyError::OrderConditionViolated { .. }) => {
                            failed("perturbed (cubic)", e.to_string())
                        }
                        Err(e) => return Err(e.into()),
                    },
                );
            }
        }
    }
    Ok(out)
}

/// Disturbance-free runs from 16 points on the `0.9·c` level set, each
/// checked for Lyapunov decrease.
pub fn lyapunov_from_level_set<T: Real>(
    cert: &ControllerCert<T>,
    plant: &ControlAffinePlant<T>,
    dict: &Dictionary<T>,
    t_end: f64,
) -> Result<CheckReport, ExperimentError> {
    let pts = level_set_points(cert, dict, 16, 0.9, 20.0)?;
    if pts.is_empty() {
        return Ok(failed(
            "lyapunov decrease",
            "no point of the level set found".into(),
        ));
    }
    let ctrl = crate::synthesis::controller_from(cert, dict);
    let trajs: Vec<Option<crate::plant::Trajectory<T>>> = pts
        .iter()
        .map(|x0| {
            crate::plant::simulate(
                plant,
                &ctrl,
                &DisturbanceModel::None,
                &x0.map(T::lit),
                t_end,
                1e-3,
            )
            .ok()
        })
        .collect();
    lyapunov_over(cert, dict, &trajs)
}

/// Lyapunov decrease over several trajectories; a diverged run is a failure.
pub fn lyapunov_over<T: Real>(
    cert: &ControllerCert<T>,
    dict: &Dictionary<T>,
    trajs: &[Option<crate::plant::Trajectory<T>>],
) -> Result<CheckReport, ExperimentError> {
    let mut agg = CheckReport {
        name: "lyapunov decrease".into(),
        pass: true,
        margin: f64::NEG_INFINITY,
        required_margin: 0.0,
        samples: 0,
        violations: 0,
        details: Vec::new(),
    };
    for t in trajs {
        match t {
            Some(t) => {
                let r = lyapunov_decrease(t, cert, dict)?;
                agg.samples += r.samples;
                agg.violations += r.violations;
                agg.margin = agg.margin.max(r.margin);
                agg.details.extend(r.details.into_iter().take(3));
            }
            None => {
                agg.violations += 1;
                agg.details.push("trajectory diverged".into());
            }
        }
    }
    agg.pass = agg.violations == 0;
    Ok(agg)
}

/// Results of checking each route's certificate against the other route.
#[derive(Debug, Clone, Serialize)]
pub struct CrossReport {
    pub direct_cert: Option<crate::synthesis::CertJson>,
    pub indirect_cert: Option<crate::synthesis::CertJson>,
    pub direct_error: Option<String>,
    pub indirect_error: Option<String>,
    /// Direct certificate against the model-based inequality.
    pub direct_vs_model: Option<CheckReport>,
    /// Indirect certificate against the data-based inequality.
    pub indirect_vs_data: Option<CheckReport>,
}

impl CrossReport {
    pub fn all_pass(&self) -> bool {
        matches!(&self.direct_vs_model, Some(r) if r.pass)
            && matches!(&self.indirect_vs_data, Some(r) if r.pass)
    }
}

pub fn cross_validate(cfg: &CrossConfig) -> Result<CrossReport, ExperimentError> {
    let ds_d = collect::<f64>(&cfg.direct)?;
    let ds_i = collect::<f64>(&cfg.indirect)?;
    let ctx = ModelContext::from_dataset(&ds_i)?;
    let margin = cfg
        .direct
        .synthesis
        .margin
        .max(cfg.indirect.synthesis.margin);
    let mut rep = CrossReport {
        direct_cert: None,
        indirect_cert: None,
        direct_error: None,
        indirect_error: None,
        direct_vs_model: None,
        indirect_vs_data: None,
    };
    match synthesize(&cfg.direct, &ds_d) {
        Ok(o) => {
            rep.direct_vs_model = Some(model_nmi_report(&o.cert, &ctx, margin)?);
            rep.direct_cert = Some(o.cert.to_json());
        }
        Err(e) => rep.direct_error = Some(e.to_string()),
    }
    match synthesize(&cfg.indirect, &ds_i) {
        Ok(o) => {
            rep.indirect_vs_data = Some(data_lmi_report(&o.cert, &ds_d, margin)?);
            rep.indirect_cert = Some(o.cert.to_json());
        }
        Err(e) => rep.indirect_error = Some(e.to_string()),
    }
    Ok(rep)
}
