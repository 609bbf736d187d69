//! `koopstab` command-line driver.
//!
//! Exit status: 0 when every requested check passes, 1 for usage and
//! configuration errors, 2 when synthesis is infeasible, 3 when a
//! verification check fails.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use koopstab::consistency::{build_w0, ConsistencyError, Dataset, DatasetJson};
use koopstab::edmd::{estimate_error_bounds, identify, koopman_spectrum, residual, EdmdError};
use koopstab::experiment::{
    collect, cross_preset, cross_validate, preset, synthesize, verify_certificate, CrossConfig,
    ExperimentError, RunConfig, Suite, PRESET_NAMES,
};
use koopstab::plant::{
    simulate_with, write_csv, DisturbanceModel, PlantError, SimOptions, Trajectory,
};
use koopstab::synthesis::{controller_from, CertJson, ControllerCert, Route, SynthError};
use koopstab::verify::CheckReport;
use nalgebra::DVector;
use serde::Serialize;

use crate::plot::{emit_phase_plot, PlotError, View};

/// Default output root when neither `--out` nor `output_dir` is given.
const OUT_ENV: &str = "KOOPSTAB_OUT";

#[derive(Parser)]
#[command(
    name = "koopstab",
    version,
    about = "Data-driven robust stabilization through Koopman lifting"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the resolved configuration as TOML.
    Config(Common),
    /// Generate a dataset and write it as CSV and JSON.
    Collect(Common),
    /// Fit the lifted bilinear model by least squares.
    Identify(DataArgs),
    /// Synthesize a controller and verify it.
    Synth(SynthArgs),
    /// Run verification suites on a stored certificate.
    Verify(VerifyArgs),
    /// Simulate the closed loop of a stored certificate.
    Simulate(SimArgs),
    /// Check each route's certificate against the other route.
    Crossvalidate(Common),
    /// Write an SVG phase plot of a stored certificate.
    Plot(SimArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration (pendulum-direct, pendulum-indirect, or pendulum for crossvalidate).
    #[arg(long)]
    preset: Option<String>,
    /// Replaces every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_route)]
    route: Option<Route>,
    /// Comma-separated ν values.
    #[arg(long, value_parser = parse_list)]
    nu_grid: Option<Vec<f64>>,
    /// Required strict margin of the matrix inequalities.
    #[arg(long)]
    margin: Option<f64>,
}

#[derive(Args)]
struct DataArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset JSON written by `collect`; collected afresh when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Skip the verification suites.
    #[arg(long)]
    no_verify: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    cert: PathBuf,
    /// Suite to run (repeatable); defaults to the configured suites.
    #[arg(long = "suite", value_parser = parse_suite)]
    suites: Vec<Suite>,
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    cert: PathBuf,
    /// Initial state as comma-separated values (repeatable); defaults to
    /// the first closed-loop set of the configuration.
    #[arg(long, value_parser = parse_list)]
    x0: Vec<Vec<f64>>,
    #[arg(long)]
    t_end: Option<f64>,
    /// Simulate without the configured disturbance.
    #[arg(long)]
    no_disturbance: bool,
}

fn parse_route(s: &str) -> Result<Route, String> {
    match s {
        "direct" => Ok(Route::Direct),
        "indirect" => Ok(Route::Indirect),
        _ => Err(format!("unknown route `{s}` (expected direct or indirect)")),
    }
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}")))
        .collect()
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|_| {
        format!("unknown suite `{s}` (certificate, consistency_sweep, petersen, closed_loop, lyapunov, perturbation)")
    })
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Infeasible(String),
    Verification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Infeasible(_) => 2,
            Failure::Verification(_) => 3,
        }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        let hint = match &e {
            ExperimentError::Consistency(c) | ExperimentError::Edmd(EdmdError::Consistency(c)) => {
                remedy(c)
            }
            ExperimentError::Synth(SynthError::Consistency(c)) => remedy(c),
            ExperimentError::Plant(PlantError::InsufficientData { .. }) => {
                Some("increase data.sampling.samples")
            }
            _ => None,
        };
        let msg = match hint {
            Some(h) => format!("{e}\nhint: {h}"),
            None => e.to_string(),
        };
        match e {
            ExperimentError::Synth(
                SynthError::AllInfeasible { .. }
                | SynthError::SideConditionViolated { .. }
                | SynthError::CertificationFailed(_),
            ) => Failure::Infeasible(msg),
            _ => Failure::Usage(msg),
        }
    }
}

fn remedy(e: &ConsistencyError) -> Option<&'static str> {
    match e {
        ConsistencyError::AssumptionViolation { .. } => {
            Some("the data do not excite every regressor direction; increase T or use a richer input schedule")
        }
        ConsistencyError::InsufficientData { .. } => Some("increase data.sampling.samples"),
        ConsistencyError::DataInconsistent { .. } | ConsistencyError::EmptySet => {
            Some("raise the disturbance energy bound or reduce the residual (larger dictionary)")
        }
        _ => None,
    }
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let res = match cli.cmd {
        Cmd::Config(c) => cmd_config(&c),
        Cmd::Collect(c) => cmd_collect(&c),
        Cmd::Identify(a) => cmd_identify(&a),
        Cmd::Synth(a) => cmd_synth(&a),
        Cmd::Verify(a) => cmd_verify(&a),
        Cmd::Simulate(a) => cmd_simulate(&a),
        Cmd::Crossvalidate(c) => cmd_crossvalidate(&c),
        Cmd::Plot(a) => cmd_plot(&a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (kind, msg) = match &f {
                Failure::Usage(m) => ("error", m),
                Failure::Infeasible(m) => ("infeasible", m),
                Failure::Verification(m) => ("verification failed", m),
            };
            eprintln!("koopstab: {kind}: {msg}");
            ExitCode::from(f.code())
        }
    }
}

fn apply_overrides(mut cfg: RunConfig, c: &Common) -> RunConfig {
    if let Some(s) = c.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(r) = c.route {
        cfg.synthesis.route = r;
    }
    if let Some(g) = &c.nu_grid {
        cfg.synthesis.nu_grid = g.clone();
    }
    if let Some(m) = c.margin {
        cfg.synthesis.margin = m;
    }
    cfg
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_config(c: &Common) -> Result<RunConfig, Failure> {
    let cfg = match (&c.config, &c.preset) {
        (Some(p), _) => read_toml(p)?,
        (None, Some(name)) => preset(name).ok_or_else(|| {
            usage(format!(
                "unknown preset `{name}` (available: {})",
                PRESET_NAMES[..2].join(", ")
            ))
        })?,
        (None, None) => return Err(usage("one of --config or --preset is required")),
    };
    let cfg = apply_overrides(cfg, c);
    cfg.validate()?;
    Ok(cfg)
}

fn load_cross(c: &Common) -> Result<CrossConfig, Failure> {
    let mut cross: CrossConfig = match (&c.config, &c.preset) {
        (Some(p), _) => read_toml(p)?,
        (None, Some(name)) => cross_preset(name).ok_or_else(|| {
            usage(format!(
                "unknown cross-validation preset `{name}` (available: pendulum)"
            ))
        })?,
        (None, None) => return Err(usage("one of --config or --preset is required")),
    };
    if c.route.is_some() {
        return Err(usage("--route does not apply to crossvalidate"));
    }
    cross.direct = apply_overrides(cross.direct, c);
    cross.indirect = apply_overrides(cross.indirect, c);
    cross.direct.validate()?;
    cross.indirect.validate()?;
    Ok(cross)
}

fn out_dir(c: &Common, name: &str, configured: Option<&Path>) -> Result<PathBuf, Failure> {
    let dir = match (&c.out, configured) {
        (Some(o), _) => o.clone(),
        (None, Some(p)) => p.to_path_buf(),
        (None, None) => std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(name),
    };
    fs::create_dir_all(&dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_json<S: Serialize>(dir: &Path, file: &str, v: &S) -> Result<String, Failure> {
    let mut text = serde_json::to_string_pretty(v).map_err(usage)?;
    text.push('\n');
    fs::write(dir.join(file), text).map_err(|e| usage(format!("{file}: {e}")))?;
    Ok(file.to_string())
}

fn load_dataset(cfg: &RunConfig, data: Option<&Path>) -> Result<Dataset<f64>, Failure> {
    match data {
        None => Ok(collect::<f64>(cfg)?),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            let j: DatasetJson =
                serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            let ds = Dataset::from_json(&j).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            let want = cfg.dictionary.name();
            if ds.dict_name != want {
                return Err(usage(format!(
                    "{} was lifted with dictionary `{}` but the configuration uses `{want}`",
                    p.display(),
                    ds.dict_name
                )));
            }
            Ok(ds)
        }
    }
}

fn load_cert(path: &Path) -> Result<ControllerCert<f64>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let j: CertJson =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    ControllerCert::from_json(&j).map_err(|e| usage(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: &'a str,
    files: Vec<String>,
    checks: Vec<CheckSummary>,
    pass: bool,
}

#[derive(Serialize)]
struct CheckSummary {
    name: String,
    pass: bool,
    margin: f64,
    samples: usize,
    violations: usize,
}

impl From<&CheckReport> for CheckSummary {
    fn from(r: &CheckReport) -> Self {
        Self {
            name: r.name.clone(),
            pass: r.pass,
            margin: r.margin,
            samples: r.samples,
            violations: r.violations,
        }
    }
}

fn print_checks(reports: &[CheckReport]) {
    for r in reports {
        println!(
            "{} {:<28} margin {:>12.4e}  violations {}/{}",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.margin,
            r.violations,
            r.samples
        );
    }
}

fn verdict(reports: &[CheckReport]) -> Result<(), Failure> {
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.pass)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "failed checks: {}",
            failed.join(", ")
        )))
    }
}

fn cmd_config(c: &Common) -> Result<(), Failure> {
    let text = if c.preset.as_deref() == Some("pendulum") {
        toml::to_string(&load_cross(c)?).map_err(usage)?
    } else {
        toml::to_string(&load_config(c)?).map_err(usage)?
    };
    print!("{text}");
    Ok(())
}

fn cmd_collect(c: &Common) -> Result<(), Failure> {
    let cfg = load_config(c)?;
    let dir = out_dir(c, &cfg.name, cfg.output_dir.as_deref())?;
    let ds = collect::<f64>(&cfg)?;
    let mut files = vec![write_json(&dir, "dataset.json", &ds.to_json())?];
    if let Some(raw) = &ds.raw {
        let f = fs::File::create(dir.join("dataset.csv")).map_err(usage)?;
        write_csv(raw, f).map_err(usage)?;
        files.push("dataset.csv".into());
    }
    if let Some(rep) = ds.energy_report() {
        files.push(write_json(&dir, "energy.json", &rep)?);
    }
    files.push(write_json(
        &dir,
        "manifest.json",
        &Manifest {
            command: "collect",
            config: &cfg.name,
            files: files.clone(),
            checks: vec![],
            pass: true,
        },
    )?);
    println!(
        "dataset {} (T = {}, N = {}) in {}",
        ds.fingerprint(),
        ds.len(),
        ds.lifted_dim(),
        dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct IdentifySummary {
    lambda_min_w0: f64,
    rho: f64,
    residual_fro: f64,
    fitted_bounds: Option<koopstab::edmd::ErrorBound>,
    eigenvalues: Vec<[f64; 2]>,
    diagonalizable: bool,
    eigenvector_condition: f64,
}

fn cmd_identify(a: &DataArgs) -> Result<(), Failure> {
    let cfg = load_config(&a.common)?;
    let dir = out_dir(&a.common, &cfg.name, cfg.output_dir.as_deref())?;
    let ds = load_dataset(&cfg, a.data.as_deref())?;
    let model = identify(&ds).map_err(ExperimentError::from)?;
    let w0 = build_w0(&ds).map_err(ExperimentError::from)?;
    let spec = koopman_spectrum(&model);
    let summary = IdentifySummary {
        lambda_min_w0: w0.lambda_min,
        rho: 1.0 / w0.lambda_min,
        residual_fro: residual(&ds, &model).norm(),
        fitted_bounds: estimate_error_bounds(&ds, &model, 1.0).ok(),
        eigenvalues: spec.eigenvalues.iter().map(|z| [z.re, z.im]).collect(),
        diagonalizable: spec.diagonalizable,
        eigenvector_condition: spec.condition,
    };
    let files = vec![
        write_json(&dir, "model.json", &model.to_json())?,
        write_json(&dir, "identify.json", &summary)?,
    ];
    write_json(
        &dir,
        "manifest.json",
        &Manifest {
            command: "identify",
            config: &cfg.name,
            files,
            checks: vec![],
            pass: true,
        },
    )?;
    println!(
        "model (N = {}, m = {}) in {}",
        model.lifted_dim(),
        model.input_dim(),
        dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SynthSummary {
    route: Route,
    per_nu: Vec<koopstab::synthesis::NuReport>,
    diagnostics: Vec<String>,
    check: CheckReport,
}

fn cmd_synth(a: &SynthArgs) -> Result<(), Failure> {
    let common = &a.data.common;
    let cfg = load_config(common)?;
    let dir = out_dir(common, &cfg.name, cfg.output_dir.as_deref())?;
    let ds = load_dataset(&cfg, a.data.data.as_deref())?;
    let outcome = synthesize(&cfg, &ds)?;
    for d in &outcome.diagnostics {
        eprintln!("note: {d}");
    }
    let mut files = vec![
        write_json(&dir, "cert.json", &outcome.cert.to_json())?,
        write_json(
            &dir,
            "synth.json",
            &SynthSummary {
                route: cfg.synthesis.route,
                per_nu: outcome.per_nu.clone(),
                diagnostics: outcome.diagnostics.clone(),
                check: outcome.check.clone(),
            },
        )?,
    ];
    println!(
        "certificate: nu = {}, margin = {:.4e}, K = [{}]",
        outcome.cert.nu,
        outcome.cert.margin,
        outcome
            .cert
            .k
            .iter()
            .map(|k| format!("{k:.4}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    let reports = if a.no_verify {
        vec![outcome.check.clone()]
    } else {
        let r = verify_certificate(&cfg, &outcome.cert, &ds)?;
        files.push(write_json(&dir, "reports.json", &r)?);
        r
    };
    print_checks(&reports);
    let pass = reports.iter().all(|r| r.pass);
    files.push("manifest.json".into());
    write_json(
        &dir,
        "manifest.json",
        &Manifest {
            command: "synth",
            config: &cfg.name,
            files,
            checks: reports.iter().map(CheckSummary::from).collect(),
            pass,
        },
    )?;
    verdict(&reports)
}

fn cmd_verify(a: &VerifyArgs) -> Result<(), Failure> {
    let common = &a.data.common;
    let mut cfg = load_config(common)?;
    if !a.suites.is_empty() {
        cfg.verify.suites = a.suites.clone();
    }
    let dir = out_dir(common, &cfg.name, cfg.output_dir.as_deref())?;
    let cert = load_cert(&a.cert)?;
    let ds = load_dataset(&cfg, a.data.data.as_deref())?;
    if !cert.dataset_fingerprint.is_empty() && cert.dataset_fingerprint != ds.fingerprint() {
        eprintln!(
            "note: the certificate was designed from different data; checking against this dataset"
        );
    }
    let reports = verify_certificate(&cfg, &cert, &ds)?;
    print_checks(&reports);
    let mut files = vec![write_json(&dir, "reports.json", &reports)?];
    files.push("manifest.json".into());
    write_json(
        &dir,
        "manifest.json",
        &Manifest {
            command: "verify",
            config: &cfg.name,
            files,
            checks: reports.iter().map(CheckSummary::from).collect(),
            pass: reports.iter().all(|r| r.pass),
        },
    )?;
    verdict(&reports)
}

struct Runs {
    cfg: RunConfig,
    cert: ControllerCert<f64>,
    x0: Vec<DVector<f64>>,
    trajs: Vec<Result<Trajectory<f64>, PlantError>>,
    half: f64,
    tol: f64,
}

/// Closed-loop runs recorded every 10 integration steps.
fn run_closed_loop(a: &SimArgs) -> Result<Runs, Failure> {
    let cfg = load_config(&a.common)?;
    let cert = load_cert(&a.cert)?;
    let plant = cfg.plant.build::<f64>();
    let dict = cfg.dictionary::<f64>()?;
    if cert.lifted_dim() != dict.lifted_dim() {
        return Err(usage(format!(
            "certificate has N = {} but the dictionary lifts to {}",
            cert.lifted_dim(),
            dict.lifted_dim()
        )));
    }
    let spec = cfg.verify.closed_loop.first();
    let x0: Vec<DVector<f64>> = if a.x0.is_empty() {
        match spec {
            Some(s) if plant.n == 2 => s.initial_points(),
            _ => {
                return Err(usage(
                    "no --x0 given and the configuration has no planar closed-loop set",
                ))
            }
        }
    } else {
        a.x0.iter().map(|v| DVector::from_vec(v.clone())).collect()
    };
    if let Some(bad) = x0.iter().find(|x| x.len() != plant.n) {
        return Err(usage(format!(
            "initial state {bad:?} has {} entries, expected {}",
            bad.len(),
            plant.n
        )));
    }
    let t_end = a.t_end.or(spec.map(|s| s.t_end)).unwrap_or(20.0);
    let h = spec.map_or(1e-3, |s| s.h);
    let dist = match spec {
        Some(s) if !a.no_disturbance => s.disturbance.clone(),
        _ => DisturbanceModel::None,
    };
    let ctrl = controller_from(&cert, &dict);
    let trajs = x0
        .iter()
        .map(|x| {
            simulate_with(
                &plant,
                &|_, y| ctrl(y),
                &dist,
                x,
                t_end,
                SimOptions {
                    h,
                    record_every: 10,
                },
            )
        })
        .collect();
    let half = spec.map_or_else(
        || {
            x0.iter()
                .flat_map(|x| x.iter().map(|v| v.abs()))
                .fold(1.0, f64::max)
        },
        |s| s.half_width,
    );
    let tol = spec.map_or(0.05, |s| s.tol);
    Ok(Runs {
        cfg,
        cert,
        x0,
        trajs,
        half,
        tol,
    })
}

#[derive(Serialize)]
struct SimRecord {
    x0: Vec<f64>,
    file: Option<String>,
    final_norm: Option<f64>,
    error: Option<String>,
}

fn cmd_simulate(a: &SimArgs) -> Result<(), Failure> {
    let runs = run_closed_loop(a)?;
    let dir = out_dir(&a.common, &runs.cfg.name, runs.cfg.output_dir.as_deref())?;
    let mut records = Vec::new();
    for (i, (x0, t)) in runs.x0.iter().zip(&runs.trajs).enumerate() {
        let rec = match t {
            Ok(t) => {
                let file = format!("traj_{i:03}.csv");
                write_traj(&dir.join(&file), t)?;
                let norm = t.final_state().norm();
                println!("x0 = {:?}  |x(T)| = {norm:.3e}", x0.as_slice());
                SimRecord {
                    x0: x0.as_slice().to_vec(),
                    file: Some(file),
                    final_norm: Some(norm),
                    error: None,
                }
            }
            Err(e) => {
                println!("x0 = {:?}  {e}", x0.as_slice());
                SimRecord {
                    x0: x0.as_slice().to_vec(),
                    file: None,
                    final_norm: None,
                    error: Some(e.to_string()),
                }
            }
        };
        records.push(rec);
    }
    let mut files: Vec<String> = records.iter().filter_map(|r| r.file.clone()).collect();
    files.push(write_json(&dir, "simulate.json", &records)?);
    write_json(
        &dir,
        "manifest.json",
        &Manifest {
            command: "simulate",
            config: &runs.cfg.name,
            files,
            checks: vec![],
            pass: true,
        },
    )?;
    Ok(())
}

fn write_traj(path: &Path, t: &Trajectory<f64>) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).map_err(usage)?;
    let n = t.states[0].len();
    let m = t.inputs[0].len();
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=m).map(|i| format!("u{i}")));
    w.write_record(&header).map_err(usage)?;
    for k in 0..t.len() {
        let mut rec = vec![format!("{:e}", t.times[k])];
        rec.extend(t.states[k].iter().map(|v| format!("{v:e}")));
        rec.extend(t.inputs[k].iter().map(|v| format!("{v:e}")));
        w.write_record(&rec).map_err(usage)?;
    }
    w.flush().map_err(usage)?;
    Ok(())
}

fn cmd_plot(a: &SimArgs) -> Result<(), Failure> {
    let runs = run_closed_loop(a)?;
    let dir = out_dir(&a.common, &runs.cfg.name, runs.cfg.output_dir.as_deref())?;
    let plant = runs.cfg.plant.build::<f64>();
    let dict = runs.cfg.dictionary::<f64>()?;
    let ok: Vec<Trajectory<f64>> = runs.trajs.into_iter().filter_map(Result::ok).collect();
    let path = dir.join("phase.svg");
    let view = View {
        half: 1.25 * runs.half,
        origin_radius: runs.tol,
    };
    emit_phase_plot(&path, &ok, &runs.cert, &plant, &dict, view).map_err(|e| match e {
        PlotError::Unsupported(_) => usage(e),
        other => usage(other),
    })?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_crossvalidate(c: &Common) -> Result<(), Failure> {
    let cross = load_cross(c)?;
    let name = format!("{}+{}", cross.direct.name, cross.indirect.name);
    let dir = out_dir(c, &name, cross.direct.output_dir.as_deref())?;
    let rep = cross_validate(&cross)?;
    let mut files = vec![write_json(&dir, "cross.json", &rep)?];
    for (label, err) in [
        ("direct", &rep.direct_error),
        ("indirect", &rep.indirect_error),
    ] {
        if let Some(e) = err {
            println!("{label} synthesis: {e}");
        }
    }
    let checks: Vec<CheckReport> = [&rep.direct_vs_model, &rep.indirect_vs_data]
        .into_iter()
        .flatten()
        .cloned()
        .collect();
    print_checks(&checks);
    files.push("manifest.json".into());
    write_json(
        &dir,
        "manifest.json",
        &Manifest {
            command: "crossvalidate",
            config: &name,
            files,
            checks: checks.iter().map(CheckSummary::from).collect(),
            pass: rep.all_pass(),
        },
    )?;
    if rep.direct_error.is_some() || rep.indirect_error.is_some() {
        return Err(Failure::Infeasible(
            "a route produced no certificate".into(),
        ));
    }
    verdict(&checks)
}
