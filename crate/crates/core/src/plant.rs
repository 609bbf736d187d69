//! Control-affine plants, disturbances, input schedules, RK4 simulation and
//! dataset collection.

use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::{delta_from_energy, ConsistencyError, Dataset, Provenance, RawSamples};
use crate::io::IoError;
use crate::lifting::Dictionary;
use crate::scalar::Real;

type DriftFn<T> = Arc<dyn Fn(&DVector<T>) -> DVector<T> + Send + Sync>;
type InputMapFn<T> = Arc<dyn Fn(&DVector<T>) -> DMatrix<T> + Send + Sync>;

/// States beyond this norm count as divergence.
pub const DIVERGENCE_NORM: f64 = 1e6;
/// Default integration step.
pub const DEFAULT_STEP: f64 = 1e-3;
/// Default data sampling interval.
pub const DEFAULT_SAMPLE_DT: f64 = 0.01;

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("integration diverged at t = {t} (|x| = {norm:e})")]
    IntegrationDiverged { t: f64, norm: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("T = {t} samples but at least {needed} are needed")]
    InsufficientData { t: usize, needed: usize },
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Axis-aligned box `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn cube(n: usize, lo: f64, hi: f64) -> Self {
        Self {
            lo: vec![lo; n],
            hi: vec![hi; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    pub fn sample<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<T> {
        DVector::from_iterator(
            self.dim(),
            self.lo
                .iter()
                .zip(&self.hi)
                .map(|(l, h)| T::lit(rng.random_range(*l..=*h))),
        )
    }

    /// `k` points evenly spaced along the boundary of a 2-D box,
    /// counter-clockwise from the lower-left corner.
    pub fn boundary_points_2d(&self, k: usize) -> Vec<[f64; 2]> {
        assert_eq!(self.dim(), 2, "boundary sampling needs a 2-D box");
        let (w, h) = (self.hi[0] - self.lo[0], self.hi[1] - self.lo[1]);
        let per = 2.0 * (w + h);
        (0..k)
            .map(|i| {
                let mut s = per * i as f64 / k as f64;
                if s < w {
                    return [self.lo[0] + s, self.lo[1]];
                }
                s -= w;
                if s < h {
                    return [self.hi[0], self.lo[1] + s];
                }
                s -= h;
                if s < w {
                    return [self.hi[0] - s, self.hi[1]];
                }
                s -= w;
                [self.lo[0], self.hi[1] - s]
            })
            .collect()
    }
}

/// `ẋ = f(x) + g(x)·u + d̄` on a box domain.
#[derive(Clone)]
pub struct ControlAffinePlant<T: Real> {
    pub name: String,
    pub n: usize,
    pub m: usize,
    f: DriftFn<T>,
    g: InputMapFn<T>,
    pub domain: BoxDomain,
}

impl<T: Real> fmt::Debug for ControlAffinePlant<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlAffinePlant")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("domain", &self.domain)
            .finish()
    }
}

impl<T: Real> ControlAffinePlant<T> {
    pub fn new(
        name: impl Into<String>,
        n: usize,
        m: usize,
        f: impl Fn(&DVector<T>) -> DVector<T> + Send + Sync + 'static,
        g: impl Fn(&DVector<T>) -> DMatrix<T> + Send + Sync + 'static,
        domain: BoxDomain,
    ) -> Result<Self, PlantError> {
        let f0 = f(&DVector::zeros(n));
        if f0.len() != n || f0.iter().any(|v| *v != T::zero()) {
            return Err(PlantError::InvalidArgument(
                "drift must vanish at the origin".into(),
            ));
        }
        if g(&DVector::zeros(n)).shape() != (n, m) {
            return Err(PlantError::InvalidArgument(
                "input map has wrong shape".into(),
            ));
        }
        Ok(Self {
            name: name.into(),
            n,
            m,
            f: Arc::new(f),
            g: Arc::new(g),
            domain,
        })
    }

    pub fn drift(&self, x: &DVector<T>) -> DVector<T> {
        (self.f)(x)
    }

    pub fn input_map(&self, x: &DVector<T>) -> DMatrix<T> {
        (self.g)(x)
    }

    /// `f(x) + g(x)·u + d`.
    pub fn rhs(&self, x: &DVector<T>, u: &DVector<T>, d: &DVector<T>) -> DVector<T> {
        self.drift(x) + self.input_map(x) * u + d
    }
}

/// Pendulum with `m = l = 1`, damping `b = 0.01`, `g = 9.81`:
/// `ẋ₁ = x₂`, `ẋ₂ = −b·x₂ + g·sin x₁ + u`.
pub fn make_pendulum<T: Real>() -> ControlAffinePlant<T> {
    let b = T::lit(0.01);
    let grav = T::lit(9.81);
    ControlAffinePlant::new(
        "pendulum",
        2,
        1,
        move |x: &DVector<T>| DVector::from_vec(vec![x[1], -b * x[1] + grav * x[0].sin()]),
        |_x: &DVector<T>| DMatrix::from_column_slice(2, 1, &[T::zero(), T::one()]),
        BoxDomain::cube(2, -2.0, 10.0),
    )
    .expect("pendulum is well formed")
}

/// Process disturbance `d̄(t, x)` with `‖d̄‖² ≤ δ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DisturbanceModel {
    None,
    /// `√δ·(cos 2πft, sin 2πft)` on the first two state components.
    Sinusoidal {
        delta: f64,
        #[serde(default = "default_freq")]
        freq: f64,
    },
    /// Uniform in the ball of radius `√δ`, constant over intervals of
    /// length `hold`, drawn from a stream keyed by the interval index.
    BoundedRandom {
        delta: f64,
        seed: u64,
        #[serde(default = "default_hold")]
        hold: f64,
    },
}

fn default_freq() -> f64 {
    0.6
}

fn default_hold() -> f64 {
    DEFAULT_SAMPLE_DT
}

impl DisturbanceModel {
    pub fn sinusoidal(delta: f64) -> Self {
        Self::Sinusoidal {
            delta,
            freq: default_freq(),
        }
    }

    /// Per-sample energy bound `δ`.
    pub fn energy(&self) -> f64 {
        match self {
            Self::None => 0.0,
            Self::Sinusoidal { delta, .. } | Self::BoundedRandom { delta, .. } => *delta,
        }
    }

    pub fn eval<T: Real>(&self, t: f64, n: usize) -> DVector<T> {
        let mut d = DVector::zeros(n);
        match self {
            Self::None => {}
            Self::Sinusoidal { delta, freq } => {
                let s = delta.sqrt();
                let w = 2.0 * PI * freq * t;
                if n > 0 {
                    d[0] = T::lit(s * w.cos());
                }
                if n > 1 {
                    d[1] = T::lit(s * w.sin());
                }
            }
            Self::BoundedRandom { delta, seed, hold } => {
                let k = (t / hold).floor().max(0.0) as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(k);
                let dir: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                let r = delta.sqrt() * rng.random::<f64>().powf(1.0 / n.max(1) as f64);
                if norm > 0.0 {
                    for i in 0..n {
                        d[i] = T::lit(r * dir[i] / norm);
                    }
                }
            }
        }
        d
    }
}

/// Open-loop input signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputSchedule {
    Zero,
    /// Sample blocks: first zero input, then each unit vector `eᵢ`, with
    /// `T` split as evenly as possible and the remainder in the zero block.
    ZeroAndUnits,
    /// `a·sin(2π(f₀t + (f₁−f₀)t²/(2·horizon)))` on every input channel.
    Chirp {
        amplitude: f64,
        f0: f64,
        f1: f64,
        horizon: f64,
    },
    /// Zero-order hold on the given samples.
    Custom {
        times: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
}

impl InputSchedule {
    /// Default chirp: amplitude 2, 0 to 0.8 Hz over `horizon`.
    pub fn default_chirp(horizon: f64) -> Self {
        Self::Chirp {
            amplitude: 2.0,
            f0: 0.0,
            f1: 0.8,
            horizon,
        }
    }

    /// Block sizes `(T₀, T₁, …, Tₘ)` for [`InputSchedule::ZeroAndUnits`].
    pub fn zero_and_units_blocks(t: usize, m: usize) -> Vec<usize> {
        let k = m + 1;
        let base = t / k;
        let mut blocks = vec![base; k];
        blocks[0] += t - base * k;
        blocks
    }

    /// Input for sample `j` of `t` taken at time `time`.
    pub fn value<T: Real>(&self, j: usize, t: usize, time: f64, m: usize) -> DVector<T> {
        let mut u = DVector::zeros(m);
        match self {
            Self::Zero => {}
            Self::ZeroAndUnits => {
                let blocks = Self::zero_and_units_blocks(t, m);
                let mut acc = 0;
                for (b, len) in blocks.iter().enumerate() {
                    acc += len;
                    if j < acc {
                        if b > 0 {
                            u[b - 1] = T::one();
                        }
                        break;
                    }
                }
            }
            Self::Chirp { .. } | Self::Custom { .. } => return self.at_time(time, m),
        }
        u
    }

    /// Input as a function of time (sample-indexed schedules give zero).
    pub fn at_time<T: Real>(&self, time: f64, m: usize) -> DVector<T> {
        let mut u = DVector::zeros(m);
        match self {
            Self::Chirp {
                amplitude,
                f0,
                f1,
                horizon,
            } => {
                let phase = 2.0 * PI * (f0 * time + (f1 - f0) * time * time / (2.0 * horizon));
                u.fill(T::lit(amplitude * phase.sin()));
            }
            Self::Custom { times, values } => {
                let k = times.partition_point(|s| *s <= time);
                if k > 0 {
                    for (i, v) in values[k - 1].iter().take(m).enumerate() {
                        u[i] = T::lit(*v);
                    }
                }
            }
            Self::Zero | Self::ZeroAndUnits => {}
        }
        u
    }
}

/// Time samples with the exact `ẋ` recorded at each instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T: Real> {
    pub times: Vec<T>,
    pub states: Vec<DVector<T>>,
    pub inputs: Vec<DVector<T>>,
    pub rates: Vec<DVector<T>>,
}

impl<T: Real> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &DVector<T> {
        self.states.last().expect("trajectory is never empty")
    }
}

fn check_finite_state<T: Real>(x: &DVector<T>, t: f64) -> Result<(), PlantError> {
    let norm = x.norm().to_f64_lossy();
    if !norm.is_finite() || norm > DIVERGENCE_NORM {
        return Err(PlantError::IntegrationDiverged { t, norm });
    }
    Ok(())
}

/// One classical RK4 step of `ẋ = rhs(t, x)`.
pub fn rk4_general<T: Real>(
    rhs: &dyn Fn(f64, &DVector<T>) -> DVector<T>,
    x: &DVector<T>,
    t: f64,
    h: f64,
) -> Result<DVector<T>, PlantError> {
    if !(h > 0.0) {
        return Err(PlantError::InvalidArgument(format!(
            "step {h} must be positive"
        )));
    }
    let hh = T::lit(h);
    let half = T::lit(0.5) * hh;
    let k1 = rhs(t, x);
    let k2 = rhs(t + 0.5 * h, &(x + &k1 * half));
    let k3 = rhs(t + 0.5 * h, &(x + &k2 * half));
    let k4 = rhs(t + h, &(x + &k3 * hh));
    let x1 = x + (k1 + (k2 + k3) * T::lit(2.0) + k4) * (hh / T::lit(6.0));
    check_finite_state(&x1, t + h)?;
    Ok(x1)
}

/// RK4 step of `ẋ = f(x) + g(x)u + d̄(t)` with `u` held over the step.
pub fn rk4_step<T: Real>(
    plant: &ControlAffinePlant<T>,
    x: &DVector<T>,
    u: &DVector<T>,
    disturbance: &DisturbanceModel,
    t: f64,
    h: f64,
) -> Result<DVector<T>, PlantError> {
    let rhs = |s: f64, y: &DVector<T>| plant.rhs(y, u, &disturbance.eval(s, plant.n));
    rk4_general(&rhs, x, t, h)
}

/// Integration settings for [`simulate_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub h: f64,
    /// Record every k-th integration step.
    pub record_every: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            h: DEFAULT_STEP,
            record_every: 1,
        }
    }
}

/// Closed-loop simulation recording every integration step.
pub fn simulate<T: Real>(
    plant: &ControlAffinePlant<T>,
    controller: &(dyn Fn(&DVector<T>) -> DVector<T> + Sync),
    disturbance: &DisturbanceModel,
    x0: &DVector<T>,
    t_end: f64,
    h: f64,
) -> Result<Trajectory<T>, PlantError> {
    simulate_with(
        plant,
        &|_, x| controller(x),
        disturbance,
        x0,
        t_end,
        SimOptions { h, record_every: 1 },
    )
}

/// Simulation with a time-varying feedback `u = κ(t, x)`, evaluated at
/// every RK4 stage.
pub fn simulate_with<T: Real>(
    plant: &ControlAffinePlant<T>,
    controller: &(dyn Fn(f64, &DVector<T>) -> DVector<T> + Sync),
    disturbance: &DisturbanceModel,
    x0: &DVector<T>,
    t_end: f64,
    opts: SimOptions,
) -> Result<Trajectory<T>, PlantError> {
    if !(opts.h > 0.0) || !(t_end > 0.0) || opts.record_every == 0 {
        return Err(PlantError::InvalidArgument(
            "step, horizon and recording stride must be positive".into(),
        ));
    }
    if x0.len() != plant.n {
        return Err(PlantError::InvalidArgument(
            "initial state has wrong dimension".into(),
        ));
    }
    let steps = (t_end / opts.h).round() as usize;
    let rhs = |s: f64, y: &DVector<T>| {
        let u = controller(s, y);
        plant.rhs(y, &u, &disturbance.eval(s, plant.n))
    };
    let cap = steps / opts.record_every + 1;
    let mut tr = Trajectory {
        times: Vec::with_capacity(cap),
        states: Vec::with_capacity(cap),
        inputs: Vec::with_capacity(cap),
        rates: Vec::with_capacity(cap),
    };
    let mut record = |t: f64, x: &DVector<T>| {
        let u = controller(t, x);
        let rate = plant.rhs(x, &u, &disturbance.eval(t, plant.n));
        tr.times.push(T::lit(t));
        tr.states.push(x.clone());
        tr.inputs.push(u);
        tr.rates.push(rate);
    };
    let mut x = x0.clone();
    check_finite_state(&x, 0.0)?;
    record(0.0, &x);
    for k in 0..steps {
        let t = k as f64 * opts.h;
        x = rk4_general(&rhs, &x, t, opts.h)?;
        if (k + 1) % opts.record_every == 0 {
            record((k + 1) as f64 * opts.h, &x);
        }
    }
    Ok(tr)
}

/// How samples are drawn for a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplingSpec {
    /// Independent states uniform in `domain`; sample `j` is stamped with
    /// time `j·dt` for the disturbance.
    IidStates {
        domain: BoxDomain,
        samples: usize,
        seed: u64,
        #[serde(default = "default_dt")]
        dt: f64,
    },
    /// One open-loop trajectory sampled every `dt`.
    Trajectory {
        x0: Vec<f64>,
        samples: usize,
        #[serde(default = "default_dt")]
        dt: f64,
        #[serde(default = "default_h")]
        h: f64,
    },
}

fn default_dt() -> f64 {
    DEFAULT_SAMPLE_DT
}

fn default_h() -> f64 {
    DEFAULT_STEP
}

impl SamplingSpec {
    pub fn samples(&self) -> usize {
        match self {
            Self::IidStates { samples, .. } | Self::Trajectory { samples, .. } => *samples,
        }
    }
}

/// Generates raw samples with exact rates (including the disturbance),
/// lifts them and sets `Δ = √(Tδ)·I`.
pub fn collect_dataset<T: Real>(
    plant: &ControlAffinePlant<T>,
    dict: &Dictionary<T>,
    schedule: &InputSchedule,
    disturbance: &DisturbanceModel,
    sampling: &SamplingSpec,
) -> Result<Dataset<T>, PlantError> {
    let t_count = sampling.samples();
    let (nl, m) = (dict.lifted_dim(), plant.m);
    let needed = nl + m + nl * m;
    if t_count < needed {
        return Err(PlantError::InsufficientData { t: t_count, needed });
    }
    let mut raw = RawSamples {
        t: Vec::with_capacity(t_count),
        x: Vec::with_capacity(t_count),
        u: Vec::with_capacity(t_count),
        xdot: Vec::with_capacity(t_count),
    };
    let mut dbar = Vec::with_capacity(t_count);
    let mut provenance = Provenance {
        source: plant.name.clone(),
        ..Provenance::default()
    };
    match sampling {
        SamplingSpec::IidStates {
            domain,
            samples,
            seed,
            dt,
        } => {
            if domain.dim() != plant.n {
                return Err(PlantError::InvalidArgument("domain dimension".into()));
            }
            provenance.seed = Some(*seed);
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            for j in 0..*samples {
                let time = j as f64 * dt;
                let x = domain.sample::<T, _>(&mut rng);
                let u = schedule.value::<T>(j, *samples, time, m);
                let d = disturbance.eval::<T>(time, plant.n);
                raw.xdot.push(plant.rhs(&x, &u, &d));
                raw.t.push(T::lit(time));
                raw.x.push(x);
                raw.u.push(u);
                dbar.push(d);
            }
        }
        SamplingSpec::Trajectory { x0, samples, dt, h } => {
            if x0.len() != plant.n {
                return Err(PlantError::InvalidArgument("x0 dimension".into()));
            }
            let stride = (dt / h).round() as usize;
            if stride == 0 || ((stride as f64) * h - dt).abs() > 1e-9 * dt {
                return Err(PlantError::InvalidArgument(
                    "sampling interval must be a multiple of the step".into(),
                ));
            }
            let input = |s: f64, _x: &DVector<T>| {
                let j = (s / dt).floor() as usize;
                schedule.value::<T>(j.min(samples - 1), *samples, s, m)
            };
            let x0 = DVector::from_iterator(plant.n, x0.iter().map(|v| T::lit(*v)));
            let tr = simulate_with(
                plant,
                &input,
                disturbance,
                &x0,
                (*samples - 1).max(1) as f64 * dt,
                SimOptions {
                    h: *h,
                    record_every: stride,
                },
            )?;
            for j in 0..*samples {
                let time = tr.times[j].to_f64_lossy();
                raw.t.push(tr.times[j]);
                raw.x.push(tr.states[j].clone());
                raw.u.push(tr.inputs[j].clone());
                raw.xdot.push(tr.rates[j].clone());
                dbar.push(disturbance.eval::<T>(time, plant.n));
            }
        }
    }
    let mut d0 = DMatrix::zeros(nl, t_count);
    for j in 0..t_count {
        d0.set_column(j, &(dict.jacobian(&raw.x[j]) * &dbar[j]));
    }
    let delta = delta_from_energy(t_count, disturbance.energy(), nl);
    let mut ds = Dataset::from_raw(dict, raw, delta)?;
    ds.realized_d0 = Some(d0);
    ds.provenance = provenance;
    Ok(ds)
}

/// Second-order finite-difference rates from stored states (one-sided at
/// the ends).
pub fn estimate_rates<T: Real>(times: &[T], states: &[DVector<T>]) -> Vec<DVector<T>> {
    let k = states.len();
    if k < 2 {
        return states.iter().map(|s| DVector::zeros(s.len())).collect();
    }
    (0..k)
        .map(|j| {
            let (a, b) = if j == 0 {
                (0, 1)
            } else if j == k - 1 {
                (k - 2, k - 1)
            } else {
                (j - 1, j + 1)
            };
            (&states[b] - &states[a]) / (times[b] - times[a])
        })
        .collect()
}

/// Writes `t, x1..xn, u1..um, xdot1..xdotn`.
pub fn write_csv<T: Real, W: Write>(raw: &RawSamples<T>, w: W) -> Result<(), IoError> {
    let n = raw.x.first().map(|x| x.len()).unwrap_or(0);
    let m = raw.u.first().map(|u| u.len()).unwrap_or(0);
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=m).map(|i| format!("u{i}")));
    header.extend((1..=n).map(|i| format!("xdot{i}")));
    wr.write_record(&header)?;
    for j in 0..raw.len() {
        let mut rec = vec![raw.t[j].to_f64_lossy()];
        rec.extend(raw.x[j].iter().map(|v| v.to_f64_lossy()));
        rec.extend(raw.u[j].iter().map(|v| v.to_f64_lossy()));
        rec.extend(raw.xdot[j].iter().map(|v| v.to_f64_lossy()));
        wr.write_record(rec.iter().map(|v| format!("{v:e}")))?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads the format of [`write_csv`]; dimensions come from the header.
pub fn read_csv<T: Real, R: Read>(r: R) -> Result<RawSamples<T>, IoError> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    let count = |p: &str| {
        header
            .iter()
            .filter(|h| {
                h.strip_prefix(p)
                    .is_some_and(|s| s.parse::<usize>().is_ok())
            })
            .count()
    };
    let (n, m) = (count("x"), count("u"));
    let nd = count("xdot");
    if header.first().map(String::as_str) != Some("t") || nd != n || header.len() != 1 + 2 * n + m {
        return Err(IoError::Invalid(format!("unexpected header {header:?}")));
    }
    let mut raw = RawSamples {
        t: vec![],
        x: vec![],
        u: vec![],
        xdot: vec![],
    };
    for rec in rd.records() {
        let rec = rec?;
        let v: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| IoError::Invalid(e.to_string()))?;
        if v.len() != header.len() {
            return Err(IoError::Invalid("ragged row".into()));
        }
        let vec_of = |a: usize, len: usize| {
            DVector::from_iterator(len, v[a..a + len].iter().map(|x| T::lit(*x)))
        };
        raw.t.push(T::lit(v[0]));
        raw.x.push(vec_of(1, n));
        raw.u.push(vec_of(1 + n, m));
        raw.xdot.push(vec_of(1 + n + m, n));
    }
    Ok(raw)
}

/// Lifted bilinear plant `ż = Az + B₀u + Σuᵢ Bᵢz` viewed as a
/// control-affine system in `z`.
pub fn bilinear_plant<T: Real>(
    a: DMatrix<T>,
    b0: DMatrix<T>,
    bs: Vec<DMatrix<T>>,
    domain: BoxDomain,
) -> Result<ControlAffinePlant<T>, PlantError> {
    let n = a.nrows();
    let m = b0.ncols();
    if bs.len() != m || a.ncols() != n || b0.nrows() != n || bs.iter().any(|b| b.shape() != (n, n))
    {
        return Err(PlantError::InvalidArgument("bilinear model shapes".into()));
    }
    ControlAffinePlant::new(
        "bilinear",
        n,
        m,
        move |z: &DVector<T>| &a * z,
        move |z: &DVector<T>| {
            let mut g = b0.clone();
            for (i, b) in bs.iter().enumerate() {
                let col = b * z;
                let mut c = g.column_mut(i);
                c += col;
            }
            g
        },
        domain,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifting::pendulum_dictionary;
    use nalgebra::dvector;

    #[test]
    fn pendulum_vector_field() {
        let p = make_pendulum::<f64>();
        assert_eq!(p.drift(&dvector![0.0, 0.0]), dvector![0.0, 0.0]);
        let f = p.drift(&dvector![PI / 2.0, 0.0]);
        assert!((f - dvector![0.0, 9.81]).norm() < 1e-15);
        assert_eq!(
            p.input_map(&dvector![3.0, -1.0]),
            DMatrix::from_column_slice(2, 1, &[0.0, 1.0])
        );
    }

    #[test]
    fn rk4_matches_exponential() {
        let p = ControlAffinePlant::<f64>::new(
            "decay",
            1,
            1,
            |x| -x.clone(),
            |_| DMatrix::zeros(1, 1),
            BoxDomain::cube(1, -1.0, 1.0),
        )
        .unwrap();
        let x = rk4_step(
            &p,
            &dvector![1.0],
            &dvector![0.0],
            &DisturbanceModel::None,
            0.0,
            0.01,
        )
        .unwrap();
        // 1 − h + h²/2 − h³/6 + h⁴/24
        let h: f64 = 0.01;
        let taylor = 1.0 - h + h * h / 2.0 - h.powi(3) / 6.0 + h.powi(4) / 24.0;
        assert!((x[0] - taylor).abs() < 1e-16);
        assert!((x[0] - 0.990_049_833_7).abs() < 1e-10);
    }

    #[test]
    fn rk4_zero_field_is_identity() {
        let p = ControlAffinePlant::<f64>::new(
            "still",
            2,
            1,
            |_| DVector::zeros(2),
            |_| DMatrix::zeros(2, 1),
            BoxDomain::cube(2, -1.0, 1.0),
        )
        .unwrap();
        let x = dvector![0.3, -0.2];
        assert_eq!(
            rk4_step(&p, &x, &dvector![1.0], &DisturbanceModel::None, 0.0, 0.1).unwrap(),
            x
        );
    }

    #[test]
    fn rk4_step_halving() {
        let p = make_pendulum::<f64>();
        let x0 = dvector![0.1, 0.0];
        let u = dvector![0.0];
        let one = rk4_step(&p, &x0, &u, &DisturbanceModel::None, 0.0, 1e-3).unwrap();
        let mut x = x0.clone();
        for k in 0..10 {
            x = rk4_step(&p, &x, &u, &DisturbanceModel::None, k as f64 * 1e-4, 1e-4).unwrap();
        }
        assert!((one - x).norm() < 1e-10);
    }

    #[test]
    fn equilibrium_stays_put_and_divergence_is_reported() {
        let p = make_pendulum::<f64>();
        let zero = |_: &DVector<f64>| dvector![0.0];
        let tr = simulate(
            &p,
            &zero,
            &DisturbanceModel::None,
            &dvector![0.0, 0.0],
            1.0,
            1e-3,
        )
        .unwrap();
        assert!(tr.states.iter().all(|x| x.norm() == 0.0));
        assert_eq!(tr.len(), 1001);
        let blow = |x: &DVector<f64>| dvector![1e3 * x[1].abs() + 1e3];
        let err = simulate(
            &p,
            &blow,
            &DisturbanceModel::None,
            &dvector![1.0, 0.0],
            100.0,
            1e-2,
        );
        assert!(matches!(err, Err(PlantError::IntegrationDiverged { .. })));
    }

    #[test]
    fn disturbance_energy() {
        let d = DisturbanceModel::sinusoidal(0.01);
        for k in 0..50 {
            let v = d.eval::<f64>(k as f64 * 0.137, 2);
            assert!((v.norm_squared() - 0.01).abs() < 1e-15);
        }
        let r = DisturbanceModel::BoundedRandom {
            delta: 0.04,
            seed: 9,
            hold: 0.01,
        };
        for k in 0..200 {
            let v = r.eval::<f64>(k as f64 * 0.003, 3);
            assert!(v.norm_squared() <= 0.04 + 1e-15);
        }
        assert_eq!(r.eval::<f64>(0.001, 3), r.eval::<f64>(0.009, 3));
    }

    #[test]
    fn zero_and_units_layout() {
        assert_eq!(InputSchedule::zero_and_units_blocks(10, 1), vec![5, 5]);
        assert_eq!(InputSchedule::zero_and_units_blocks(10, 2), vec![4, 3, 3]);
        let s = InputSchedule::ZeroAndUnits;
        let us: Vec<f64> = (0..10).map(|j| s.value::<f64>(j, 10, 0.0, 1)[0]).collect();
        assert_eq!(us, vec![0., 0., 0., 0., 0., 1., 1., 1., 1., 1.]);
    }

    #[test]
    fn iid_dataset_has_exact_rates_and_is_deterministic() {
        let p = make_pendulum::<f64>();
        let d = pendulum_dictionary::<f64>();
        let spec = SamplingSpec::IidStates {
            domain: BoxDomain::cube(2, -2.0, 10.0),
            samples: 100,
            seed: 4,
            dt: 0.01,
        };
        let dist = DisturbanceModel::sinusoidal(0.01);
        let ds = collect_dataset(&p, &d, &InputSchedule::ZeroAndUnits, &dist, &spec).unwrap();
        let raw = ds.raw.as_ref().unwrap();
        for j in 0..raw.len() {
            let dd = dist.eval::<f64>(raw.t[j], 2);
            let r = p.rhs(&raw.x[j], &raw.u[j], &dd);
            assert!((&r - &raw.xdot[j]).norm() < 1e-12);
        }
        let again = collect_dataset(&p, &d, &InputSchedule::ZeroAndUnits, &dist, &spec).unwrap();
        assert_eq!(ds.fingerprint(), again.fingerprint());
        assert!((ds.delta[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn too_few_samples() {
        let p = make_pendulum::<f64>();
        let d = pendulum_dictionary::<f64>();
        let spec = SamplingSpec::IidStates {
            domain: BoxDomain::cube(2, -1.0, 1.0),
            samples: 8,
            seed: 0,
            dt: 0.01,
        };
        let r = collect_dataset(
            &p,
            &d,
            &InputSchedule::ZeroAndUnits,
            &DisturbanceModel::None,
            &spec,
        );
        assert!(matches!(
            r,
            Err(PlantError::InsufficientData { t: 8, needed: 9 })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let p = make_pendulum::<f64>();
        let d = pendulum_dictionary::<f64>();
        let spec = SamplingSpec::Trajectory {
            x0: vec![0.5, -0.5],
            samples: 20,
            dt: 0.01,
            h: 1e-3,
        };
        let ds = collect_dataset(
            &p,
            &d,
            &InputSchedule::default_chirp(0.2),
            &DisturbanceModel::None,
            &spec,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_csv(ds.raw.as_ref().unwrap(), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,x1,x2,u1,xdot1,xdot2"));
        let back: RawSamples<f64> = read_csv(buf.as_slice()).unwrap();
        assert_eq!(&back, ds.raw.as_ref().unwrap());
    }

    #[test]
    fn estimated_rates_track_exact_rates() {
        let p = make_pendulum::<f64>();
        let zero = |_: &DVector<f64>| dvector![0.0];
        let tr = simulate(
            &p,
            &zero,
            &DisturbanceModel::None,
            &dvector![0.1, 0.0],
            0.5,
            1e-3,
        )
        .unwrap();
        let est = estimate_rates(&tr.times, &tr.states);
        for j in 1..tr.len() - 1 {
            assert!((&est[j] - &tr.rates[j]).norm() < 1e-5);
        }
    }

    #[test]
    fn boundary_points_lie_on_the_box() {
        let b = BoxDomain::cube(2, -2.0, 2.0);
        let pts = b.boundary_points_2d(8);
        assert_eq!(pts.len(), 8);
        for p in pts {
            assert!(p[0].abs() == 2.0 || p[1].abs() == 2.0);
        }
    }
}
