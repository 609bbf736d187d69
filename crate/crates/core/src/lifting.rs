//! Dictionaries of observables `Ψ: ℝⁿ → ℝᴺ`, their Jacobians and the
//! linear state recovery `x = C·Ψ(x)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

type EvalFn<T> = Arc<dyn Fn(&DVector<T>) -> DVector<T> + Send + Sync>;
type JacFn<T> = Arc<dyn Fn(&DVector<T>) -> DMatrix<T> + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DictionaryError {
    #[error("unknown dictionary `{0}`")]
    Unknown(String),
    #[error("factor refers to state index {index} but the state has dimension {n}")]
    BadIndex { index: usize, n: usize },
    #[error("observable {0} does not vanish at the origin")]
    NonzeroAtOrigin(usize),
    #[error("recovery matrix has shape {rows}x{cols}, expected {n}x{n_lift}")]
    BadRecovery {
        rows: usize,
        cols: usize,
        n: usize,
        n_lift: usize,
    },
}

/// One factor of a product observable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Factor {
    Pow { var: usize, exp: u32 },
    Sin { var: usize },
    Cos { var: usize },
}

impl Factor {
    fn var(&self) -> usize {
        match self {
            Factor::Pow { var, .. } | Factor::Sin { var } | Factor::Cos { var } => *var,
        }
    }

    fn eval<T: Real>(&self, x: &DVector<T>) -> T {
        match self {
            Factor::Pow { var, exp } => x[*var].powi(*exp as i32),
            Factor::Sin { var } => x[*var].sin(),
            Factor::Cos { var } => x[*var].cos(),
        }
    }

    fn deriv<T: Real>(&self, x: &DVector<T>) -> T {
        match self {
            Factor::Pow { exp: 0, .. } => T::zero(),
            Factor::Pow { var, exp } => T::lit(*exp as f64) * x[*var].powi(*exp as i32 - 1),
            Factor::Sin { var } => x[*var].cos(),
            Factor::Cos { var } => -x[*var].sin(),
        }
    }
}

/// Named, serializable dictionary description used by configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum DictionarySpec {
    /// `[x₁, x₂, sin x₁, x₂ cos x₁]`.
    Pendulum,
    /// `Ψ(x) = x`.
    Identity { n: usize },
    /// The state coordinates followed by one product observable per entry
    /// of `extra`.
    MonomialTrig { n: usize, extra: Vec<Vec<Factor>> },
}

impl DictionarySpec {
    pub fn name(&self) -> String {
        match self {
            DictionarySpec::Pendulum => "pendulum".into(),
            DictionarySpec::Identity { n } => format!("identity{n}"),
            DictionarySpec::MonomialTrig { n, extra } => {
                format!("monomial_trig{n}x{}", n + extra.len())
            }
        }
    }

    pub fn build<T: Real>(&self) -> Result<Dictionary<T>, DictionaryError> {
        match self {
            DictionarySpec::Pendulum => Ok(pendulum_dictionary()),
            DictionarySpec::Identity { n } => Ok(Dictionary::identity(*n)),
            DictionarySpec::MonomialTrig { n, extra } => {
                Dictionary::monomial_trig(self.name(), *n, extra.clone(), self.clone())
            }
        }
    }
}

/// Dictionary of observables with Jacobian and recovery matrix `C`.
#[derive(Clone)]
pub struct Dictionary<T: Real> {
    name: String,
    n: usize,
    n_lift: usize,
    eval: EvalFn<T>,
    jac: Option<JacFn<T>>,
    recovery: DMatrix<T>,
    spec: Option<DictionarySpec>,
}

impl<T: Real> fmt::Debug for Dictionary<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Dictionary")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("n_lift", &self.n_lift)
            .field("analytic_jacobian", &self.jac.is_some())
            .finish()
    }
}

impl<T: Real> Dictionary<T> {
    /// Wraps user-supplied closures. Without `jac`, Jacobians fall back to
    /// central differences.
    pub fn custom(
        name: impl Into<String>,
        n: usize,
        n_lift: usize,
        eval: impl Fn(&DVector<T>) -> DVector<T> + Send + Sync + 'static,
        jac: Option<JacFn<T>>,
        recovery: DMatrix<T>,
    ) -> Result<Self, DictionaryError> {
        if recovery.shape() != (n, n_lift) {
            return Err(DictionaryError::BadRecovery {
                rows: recovery.nrows(),
                cols: recovery.ncols(),
                n,
                n_lift,
            });
        }
        Ok(Self {
            name: name.into(),
            n,
            n_lift,
            eval: Arc::new(eval),
            jac,
            recovery,
            spec: None,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            name: format!("identity{n}"),
            n,
            n_lift: n,
            eval: Arc::new(|x: &DVector<T>| x.clone()),
            jac: Some(Arc::new(move |_x: &DVector<T>| DMatrix::identity(n, n))),
            recovery: DMatrix::identity(n, n),
            spec: Some(DictionarySpec::Identity { n }),
        }
    }

    /// State coordinates followed by product observables built from
    /// powers, sines and cosines of single coordinates.
    pub fn monomial_trig(
        name: impl Into<String>,
        n: usize,
        extra: Vec<Vec<Factor>>,
        spec: DictionarySpec,
    ) -> Result<Self, DictionaryError> {
        for f in extra.iter().flatten() {
            if f.var() >= n {
                return Err(DictionaryError::BadIndex { index: f.var(), n });
            }
        }
        let zero = DVector::<T>::zeros(n);
        for (k, obs) in extra.iter().enumerate() {
            let v = obs.iter().fold(T::one(), |acc, f| acc * f.eval(&zero));
            if v != T::zero() {
                return Err(DictionaryError::NonzeroAtOrigin(n + k));
            }
        }
        let n_lift = n + extra.len();
        let extra = Arc::new(extra);
        let ex_eval = Arc::clone(&extra);
        let eval = move |x: &DVector<T>| {
            let mut z = DVector::zeros(n_lift);
            z.rows_mut(0, n).copy_from(x);
            for (k, obs) in ex_eval.iter().enumerate() {
                z[n + k] = obs.iter().fold(T::one(), |acc, f| acc * f.eval(x));
            }
            z
        };
        let jac = move |x: &DVector<T>| {
            let mut j = DMatrix::zeros(n_lift, n);
            for i in 0..n {
                j[(i, i)] = T::one();
            }
            for (k, obs) in extra.iter().enumerate() {
                // product rule over the factors
                for (a, fa) in obs.iter().enumerate() {
                    let rest = obs
                        .iter()
                        .enumerate()
                        .filter(|(b, _)| *b != a)
                        .fold(T::one(), |acc, (_, fb)| acc * fb.eval(x));
                    j[(n + k, fa.var())] += fa.deriv(x) * rest;
                }
            }
            j
        };
        let mut recovery = DMatrix::zeros(n, n_lift);
        for i in 0..n {
            recovery[(i, i)] = T::one();
        }
        Ok(Self {
            name: name.into(),
            n,
            n_lift,
            eval: Arc::new(eval),
            jac: Some(Arc::new(jac)),
            recovery,
            spec: Some(spec),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// State dimension `n`.
    pub fn state_dim(&self) -> usize {
        self.n
    }

    /// Lifted dimension `N`.
    pub fn lifted_dim(&self) -> usize {
        self.n_lift
    }

    pub fn recovery_matrix(&self) -> &DMatrix<T> {
        &self.recovery
    }

    pub fn spec(&self) -> Option<&DictionarySpec> {
        self.spec.as_ref()
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.jac.is_some()
    }

    pub fn lift(&self, x: &DVector<T>) -> DVector<T> {
        (self.eval)(x)
    }

    /// `∇Ψ(x)`, analytic when available.
    pub fn jacobian(&self, x: &DVector<T>) -> DMatrix<T> {
        match &self.jac {
            Some(j) => j(x),
            None => self.fd_jacobian(x),
        }
    }

    /// Central-difference Jacobian with step `1e−6·(1+|xᵢ|)`.
    pub fn fd_jacobian(&self, x: &DVector<T>) -> DMatrix<T> {
        let mut j = DMatrix::zeros(self.n_lift, self.n);
        let two = T::lit(2.0);
        for i in 0..self.n {
            let h = T::lit(1e-6) * (T::one() + x[i].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let col = (self.lift(&xp) - self.lift(&xm)) / (two * h);
            j.set_column(i, &col);
        }
        j
    }

    /// `ż = ∇Ψ(x)·ẋ`.
    pub fn lift_derivative(&self, x: &DVector<T>, xdot: &DVector<T>) -> DVector<T> {
        self.jacobian(x) * xdot
    }

    /// `x = C·z`.
    pub fn recover(&self, z: &DVector<T>) -> DVector<T> {
        &self.recovery * z
    }

    pub fn lift_point(&self, x: &DVector<T>, xdot: Option<&DVector<T>>) -> LiftedPoint<T> {
        LiftedPoint {
            z: self.lift(x),
            zdot: xdot.map(|v| self.lift_derivative(x, v)),
        }
    }
}

/// Lifted state, optionally with its time derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedPoint<T: Real> {
    pub z: DVector<T>,
    pub zdot: Option<DVector<T>>,
}

/// `Ψ(x) = [x₁, x₂, sin x₁, x₂ cos x₁]` with `C = [I₂ 0]`.
pub fn pendulum_dictionary<T: Real>() -> Dictionary<T> {
    let extra = vec![
        vec![Factor::Sin { var: 0 }],
        vec![Factor::Pow { var: 1, exp: 1 }, Factor::Cos { var: 0 }],
    ];
    Dictionary::monomial_trig("pendulum", 2, extra, DictionarySpec::Pendulum)
        .expect("pendulum dictionary is well formed")
}

/// Looks a dictionary up by its registered name.
pub fn dictionary_by_name<T: Real>(name: &str) -> Result<Dictionary<T>, DictionaryError> {
    if name == "pendulum" {
        return Ok(pendulum_dictionary());
    }
    if let Some(n) = name.strip_prefix("identity").and_then(|s| s.parse().ok()) {
        return Ok(Dictionary::identity(n));
    }
    Err(DictionaryError::Unknown(name.to_string()))
}
