//! Affine matrix inequalities and a small interior-point feasibility solver.
//!
//! A problem is a set of variables (symmetric matrices, rectangular
//! matrices, scalars) and constraints `F(y) = F₀ + Σ yᵢFᵢ ≺ 0`. The solver
//! maximizes the common margin `t` in `F_k(y) ⪯ −t·I` with a log-det barrier
//! and Newton steps, then re-checks the answer with an eigenvalue test that
//! does not trust anything the solver computed.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{max_eig, SymMatrix};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmiError {
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("duplicate variable `{0}`")]
    DuplicateVariable(String),
    #[error("shape mismatch in `{constraint}`: {detail}")]
    ShapeMismatch { constraint: String, detail: String },
    #[error("constraint `{constraint}` is not symmetric in `{var}`")]
    NotSymmetric { constraint: String, var: String },
    #[error("constraint `{0}` was built for a different variable list")]
    LayoutMismatch(String),
    #[error("no strict constraint to maximize a margin over")]
    NoStrictConstraint,
    #[error("variable `{0}` has an empty admissible range")]
    EmptyRange(String),
}

/// Shape of a decision variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarKind {
    Symmetric(usize),
    Matrix { rows: usize, cols: usize },
    Scalar,
}

impl VarKind {
    /// Number of free coordinates.
    pub fn dof(&self) -> usize {
        match *self {
            VarKind::Symmetric(n) => n * (n + 1) / 2,
            VarKind::Matrix { rows, cols } => rows * cols,
            VarKind::Scalar => 1,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match *self {
            VarKind::Symmetric(n) => (n, n),
            VarKind::Matrix { rows, cols } => (rows, cols),
            VarKind::Scalar => (1, 1),
        }
    }
}

/// Decision variable with optional strict side constraints: scalar bounds
/// `lower < x < upper`, and `min_eig·I ≺ P ≺ max_eig·I` for symmetric ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub kind: VarKind,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub min_eig: Option<f64>,
    pub max_eig: Option<f64>,
}

impl VariableSpec {
    fn new(name: &str, kind: VarKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            lower: None,
            upper: None,
            min_eig: None,
            max_eig: None,
        }
    }

    pub fn symmetric(name: &str, n: usize) -> Self {
        Self::new(name, VarKind::Symmetric(n))
    }

    pub fn matrix(name: &str, rows: usize, cols: usize) -> Self {
        Self::new(name, VarKind::Matrix { rows, cols })
    }

    pub fn scalar(name: &str) -> Self {
        Self::new(name, VarKind::Scalar)
    }

    pub fn lower(mut self, v: f64) -> Self {
        self.lower = Some(v);
        self
    }

    pub fn upper(mut self, v: f64) -> Self {
        self.upper = Some(v);
        self
    }

    pub fn min_eig(mut self, v: f64) -> Self {
        self.min_eig = Some(v);
        self
    }

    pub fn max_eig(mut self, v: f64) -> Self {
        self.max_eig = Some(v);
        self
    }

    /// A strictly admissible starting value.
    fn start(&self) -> Result<DMatrix<f64>, LmiError> {
        let pick = |lo: Option<f64>, hi: Option<f64>| -> Result<f64, LmiError> {
            match (lo, hi) {
                (Some(l), Some(h)) if l >= h => Err(LmiError::EmptyRange(self.name.clone())),
                (Some(l), Some(h)) => Ok(0.5 * (l + h)),
                (Some(l), None) => Ok(if l < 0.0 { 0.0 } else { (2.0 * l).max(l + 1.0) }),
                (None, Some(h)) => Ok(if h > 0.0 { 0.0 } else { h - 1.0 }),
                (None, None) => Ok(0.0),
            }
        };
        let (r, c) = self.kind.shape();
        Ok(match self.kind {
            VarKind::Scalar => DMatrix::from_element(1, 1, pick(self.lower, self.upper)?),
            VarKind::Symmetric(n) => {
                let lo = self.min_eig;
                let v = match (lo, self.max_eig) {
                    (None, None) => 0.0,
                    _ => pick(lo, self.max_eig)?,
                };
                DMatrix::identity(n, n) * v
            }
            VarKind::Matrix { .. } => DMatrix::zeros(r, c),
        })
    }
}

/// Values of every variable, keyed by name; scalars are 1×1.
pub type Assignment<T> = BTreeMap<String, DMatrix<T>>;

/// Reads a scalar from an assignment.
pub fn scalar_of<T: Real>(a: &Assignment<T>, name: &str) -> Option<T> {
    a.get(name).map(|m| m[(0, 0)])
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    names: Vec<String>,
    kinds: Vec<VarKind>,
    offsets: Vec<usize>,
    total: usize,
}

impl Layout {
    fn new(vars: &[VariableSpec]) -> Result<Self, LmiError> {
        let mut names = Vec::new();
        let mut kinds = Vec::new();
        let mut offsets = Vec::new();
        let mut total = 0;
        for v in vars {
            if names.contains(&v.name) {
                return Err(LmiError::DuplicateVariable(v.name.clone()));
            }
            names.push(v.name.clone());
            kinds.push(v.kind);
            offsets.push(total);
            total += v.kind.dof();
        }
        Ok(Self {
            names,
            kinds,
            offsets,
            total,
        })
    }

    fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn unpack<T: Real>(&self, y: &DVector<T>) -> Assignment<T> {
        let mut out = BTreeMap::new();
        for (k, name) in self.names.iter().enumerate() {
            out.insert(
                name.clone(),
                unpack_one(self.kinds[k], &y.as_slice()[self.offsets[k]..]),
            );
        }
        out
    }

    fn pack<T: Real>(&self, a: &Assignment<T>) -> Result<DVector<T>, LmiError> {
        let mut y = DVector::zeros(self.total);
        for (k, name) in self.names.iter().enumerate() {
            let m = a
                .get(name)
                .ok_or_else(|| LmiError::UnknownVariable(name.clone()))?;
            if m.shape() != self.kinds[k].shape() {
                return Err(LmiError::ShapeMismatch {
                    constraint: "assignment".into(),
                    detail: format!("{name} has shape {:?}", m.shape()),
                });
            }
            let off = self.offsets[k];
            match self.kinds[k] {
                VarKind::Symmetric(n) => {
                    let mut p = 0;
                    for i in 0..n {
                        for j in i..n {
                            y[off + p] = (m[(i, j)] + m[(j, i)]) * T::lit(0.5);
                            p += 1;
                        }
                    }
                }
                _ => {
                    for (p, v) in m.iter().enumerate() {
                        y[off + p] = *v;
                    }
                }
            }
        }
        Ok(y)
    }
}

fn unpack_one<T: Real>(kind: VarKind, y: &[T]) -> DMatrix<T> {
    match kind {
        VarKind::Symmetric(n) => {
            let mut m = DMatrix::zeros(n, n);
            let mut p = 0;
            for i in 0..n {
                for j in i..n {
                    m[(i, j)] = y[p];
                    m[(j, i)] = y[p];
                    p += 1;
                }
            }
            m
        }
        VarKind::Matrix { rows, cols } => DMatrix::from_column_slice(rows, cols, &y[..rows * cols]),
        VarKind::Scalar => DMatrix::from_element(1, 1, y[0]),
    }
}

#[derive(Debug, Clone)]
struct Term<T: Real> {
    var: String,
    transpose: bool,
    left: Option<DMatrix<T>>,
    right: Option<DMatrix<T>>,
    scale: T,
}

impl<T: Real> Term<T> {
    fn eval(&self, x: &DMatrix<T>) -> Result<DMatrix<T>, String> {
        let xs = if self.transpose {
            x.transpose()
        } else {
            x.clone()
        };
        let out = if xs.shape() == (1, 1) {
            // scalars scale whatever matrix the sandwich factors form
            let s = xs[(0, 0)];
            match (&self.left, &self.right) {
                (None, None) => xs,
                (Some(l), None) => l * s,
                (None, Some(r)) => r * s,
                (Some(l), Some(r)) => {
                    if l.ncols() != r.nrows() {
                        return Err(format!("{:?} times {:?}", l.shape(), r.shape()));
                    }
                    l * r * s
                }
            }
        } else {
            let mut m = xs;
            if let Some(l) = &self.left {
                if l.ncols() != m.nrows() {
                    return Err(format!(
                        "{:?} times {} {:?}",
                        l.shape(),
                        self.var,
                        m.shape()
                    ));
                }
                m = l * m;
            }
            if let Some(r) = &self.right {
                if m.ncols() != r.nrows() {
                    return Err(format!(
                        "{} {:?} times {:?}",
                        self.var,
                        m.shape(),
                        r.shape()
                    ));
                }
                m *= r;
            }
            m
        };
        Ok(out * self.scale)
    }
}

/// Affine matrix expression `C + Σ sₖ·Lₖ·Xₖ(ᵀ)·Rₖ`.
///
/// A scalar variable times the factors means `x·(L·R)`, so
/// `LinExpr::var("tau").lmul(I)` is `τ·I`.
#[derive(Debug, Clone)]
pub struct LinExpr<T: Real> {
    constant: Option<DMatrix<T>>,
    terms: Vec<Term<T>>,
}

impl<T: Real> LinExpr<T> {
    pub fn zero() -> Self {
        Self {
            constant: None,
            terms: Vec::new(),
        }
    }

    pub fn constant(m: DMatrix<T>) -> Self {
        Self {
            constant: Some(m),
            terms: Vec::new(),
        }
    }

    pub fn var(name: &str) -> Self {
        Self {
            constant: None,
            terms: vec![Term {
                var: name.to_string(),
                transpose: false,
                left: None,
                right: None,
                scale: T::one(),
            }],
        }
    }

    /// `Xᵀ`.
    pub fn var_t(name: &str) -> Self {
        Self::var(name).transpose()
    }

    pub fn scale(mut self, s: T) -> Self {
        if let Some(c) = self.constant.as_mut() {
            *c *= s;
        }
        for t in &mut self.terms {
            t.scale *= s;
        }
        self
    }

    pub fn neg(self) -> Self {
        self.scale(-T::one())
    }

    /// `M·self`.
    pub fn lmul(mut self, m: &DMatrix<T>) -> Self {
        if let Some(c) = self.constant.as_mut() {
            *c = m * &*c;
        }
        for t in &mut self.terms {
            t.left = Some(match &t.left {
                Some(l) => m * l,
                None => m.clone(),
            });
        }
        self
    }

    /// `self·M`.
    pub fn rmul(mut self, m: &DMatrix<T>) -> Self {
        if let Some(c) = self.constant.as_mut() {
            *c = &*c * m;
        }
        for t in &mut self.terms {
            t.right = Some(match &t.right {
                Some(r) => r * m,
                None => m.clone(),
            });
        }
        self
    }

    pub fn transpose(mut self) -> Self {
        if let Some(c) = self.constant.as_mut() {
            *c = c.transpose();
        }
        for t in &mut self.terms {
            let l = t.left.take().map(|m| m.transpose());
            let r = t.right.take().map(|m| m.transpose());
            t.left = r;
            t.right = l;
            t.transpose = !t.transpose;
        }
        self
    }

    pub fn plus(mut self, other: Self) -> Self {
        self.constant = match (self.constant, other.constant) {
            (Some(a), Some(b)) => Some(a + b),
            (a, b) => a.or(b),
        };
        self.terms.extend(other.terms);
        self
    }

    pub fn minus(self, other: Self) -> Self {
        self.plus(other.neg())
    }

    /// `self + selfᵀ`.
    pub fn sym(self) -> Self {
        let t = self.clone().transpose();
        self.plus(t)
    }

    fn vars(&self) -> impl Iterator<Item = &str> {
        self.terms.iter().map(|t| t.var.as_str())
    }

    fn eval(&self, values: &Assignment<T>, rows: usize, cols: usize) -> Result<DMatrix<T>, String> {
        let mut out = DMatrix::zeros(rows, cols);
        if let Some(c) = &self.constant {
            if c.shape() != (rows, cols) {
                return Err(format!(
                    "constant {:?}, block {:?}",
                    c.shape(),
                    (rows, cols)
                ));
            }
            out += c;
        }
        for t in &self.terms {
            let x = values
                .get(&t.var)
                .ok_or_else(|| format!("unknown {}", t.var))?;
            let v = t.eval(x)?;
            if v.shape() != (rows, cols) {
                return Err(format!(
                    "term in {} gives {:?}, block {:?}",
                    t.var,
                    v.shape(),
                    (rows, cols)
                ));
            }
            out += v;
        }
        Ok(out)
    }
}

/// Assembles a symmetric block matrix from upper-triangular block entries.
#[derive(Debug, Clone)]
pub struct BlockBuilder<T: Real> {
    name: String,
    sizes: Vec<usize>,
    blocks: BTreeMap<(usize, usize), LinExpr<T>>,
}

impl<T: Real> BlockBuilder<T> {
    pub fn new(name: &str, sizes: Vec<usize>) -> Self {
        Self {
            name: name.to_string(),
            sizes,
            blocks: BTreeMap::new(),
        }
    }

    /// Sets block `(i, j)`; the mirrored block is its transpose.
    pub fn set(&mut self, i: usize, j: usize, e: LinExpr<T>) -> &mut Self {
        if i <= j {
            self.blocks.insert((i, j), e);
        } else {
            self.blocks.insert((j, i), e.transpose());
        }
        self
    }

    pub fn size(&self) -> usize {
        self.sizes.iter().sum()
    }

    fn assemble(&self, values: &Assignment<T>) -> Result<DMatrix<T>, LmiError> {
        let n = self.size();
        let mut off = vec![0; self.sizes.len()];
        for k in 1..self.sizes.len() {
            off[k] = off[k - 1] + self.sizes[k - 1];
        }
        let mut m = DMatrix::zeros(n, n);
        for (&(i, j), e) in &self.blocks {
            if i >= self.sizes.len() || j >= self.sizes.len() {
                return Err(LmiError::ShapeMismatch {
                    constraint: self.name.clone(),
                    detail: format!("block ({i},{j}) out of range"),
                });
            }
            let b = e
                .eval(values, self.sizes[i], self.sizes[j])
                .map_err(|detail| LmiError::ShapeMismatch {
                    constraint: self.name.clone(),
                    detail: format!("block ({i},{j}): {detail}"),
                })?;
            m.view_mut((off[i], off[j]), (self.sizes[i], self.sizes[j]))
                .copy_from(&b);
            if i != j {
                m.view_mut((off[j], off[i]), (self.sizes[j], self.sizes[i]))
                    .copy_from(&b.transpose());
            }
        }
        Ok(m)
    }

    /// Expands into `F₀ + Σ yᵢFᵢ`, checking names, shapes and symmetry.
    pub fn build(
        &self,
        vars: &[VariableSpec],
        strict: bool,
    ) -> Result<AffineMatrixInequality<T>, LmiError> {
        let layout = Layout::new(vars)?;
        for e in self.blocks.values() {
            for v in e.vars() {
                if layout.index(v).is_none() {
                    return Err(LmiError::UnknownVariable(v.to_string()));
                }
            }
        }
        let zero = DVector::<T>::zeros(layout.total);
        let f0 = self.assemble(&layout.unpack(&zero))?;
        let scale = T::one() + f0.norm();
        if !is_symmetric(&f0, scale) {
            return Err(LmiError::NotSymmetric {
                constraint: self.name.clone(),
                var: "constant".into(),
            });
        }
        let mut basis = Vec::with_capacity(layout.total);
        for i in 0..layout.total {
            let mut e = zero.clone();
            e[i] = T::one();
            let fi = self.assemble(&layout.unpack(&e))? - &f0;
            if !is_symmetric(&fi, T::one() + fi.norm()) {
                let k = (0..layout.names.len())
                    .rev()
                    .find(|&k| layout.offsets[k] <= i)
                    .unwrap_or(0);
                return Err(LmiError::NotSymmetric {
                    constraint: self.name.clone(),
                    var: layout.names[k].clone(),
                });
            }
            basis.push(SymMatrix::symmetrize(fi).into_inner());
        }
        Ok(AffineMatrixInequality {
            name: self.name.clone(),
            size: self.size(),
            f0: SymMatrix::symmetrize(f0).into_inner(),
            basis,
            strict,
            layout: layout.names,
        })
    }
}

fn is_symmetric<T: Real>(m: &DMatrix<T>, scale: T) -> bool {
    let tol = T::lit(1e-12) * scale;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return false;
            }
        }
    }
    true
}

/// `F(y) = F₀ + Σ yᵢFᵢ`, required `≺ −margin·I` when `strict`, `⪯ 0`
/// otherwise.
#[derive(Debug, Clone)]
pub struct AffineMatrixInequality<T: Real> {
    pub name: String,
    pub size: usize,
    pub f0: DMatrix<T>,
    pub basis: Vec<DMatrix<T>>,
    pub strict: bool,
    layout: Vec<String>,
}

impl<T: Real> AffineMatrixInequality<T> {
    pub fn eval_vec(&self, y: &DVector<T>) -> DMatrix<T> {
        let mut m = self.f0.clone();
        for (i, fi) in self.basis.iter().enumerate() {
            if y[i] != T::zero() {
                m += fi * y[i];
            }
        }
        m
    }

    /// `F` at an assignment of the variable list it was built with.
    pub fn eval(&self, vars: &[VariableSpec], a: &Assignment<T>) -> Result<DMatrix<T>, LmiError> {
        let layout = Layout::new(vars)?;
        if layout.names != self.layout {
            return Err(LmiError::LayoutMismatch(self.name.clone()));
        }
        Ok(self.eval_vec(&layout.pack(a)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeasibilityStatus {
    Feasible,
    Infeasible,
    MarginTooSmall,
}

/// One line of a certification report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintCheck {
    pub name: String,
    /// `λ_max` of the constraint matrix in the `≺ 0` orientation.
    pub max_eig: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertReport {
    pub margin: f64,
    pub checks: Vec<ConstraintCheck>,
    pub all_pass: bool,
    /// `min_k −λ_max(F_k)` over the strict constraints.
    pub achieved: f64,
}

/// Checks an assignment by eigenvalues alone.
pub fn certify<T: Real>(
    vars: &[VariableSpec],
    a: &Assignment<T>,
    constraints: &[AffineMatrixInequality<T>],
    margin: f64,
) -> Result<CertReport, LmiError> {
    let mut checks = Vec::new();
    let mut achieved = f64::INFINITY;
    for c in constraints {
        let f = c.eval(vars, a)?;
        let l = max_eig(&SymMatrix::symmetrize(f.clone())).to_f64_lossy();
        let pass = if c.strict {
            achieved = achieved.min(-l);
            l <= -margin
        } else {
            l <= 1e-9 * (1.0 + f.norm().to_f64_lossy())
        };
        checks.push(ConstraintCheck {
            name: c.name.clone(),
            max_eig: l,
            pass,
        });
    }
    for v in vars {
        let x = a
            .get(&v.name)
            .ok_or_else(|| LmiError::UnknownVariable(v.name.clone()))?;
        let mut side = |what: &str, l: f64| {
            checks.push(ConstraintCheck {
                name: format!("{} {what}", v.name),
                max_eig: l,
                pass: l < 0.0 && l.is_finite(),
            })
        };
        if let Some(lo) = v.lower {
            side("lower bound", lo - x[(0, 0)].to_f64_lossy());
        }
        if let Some(hi) = v.upper {
            side("upper bound", x[(0, 0)].to_f64_lossy() - hi);
        }
        if let VarKind::Symmetric(_) = v.kind {
            let s = SymMatrix::symmetrize(x.clone());
            if let Some(e) = v.min_eig {
                side(
                    "min eigenvalue",
                    e - (-max_eig(&s.scale(-T::one()))).to_f64_lossy(),
                );
            }
            if let Some(e) = v.max_eig {
                side("max eigenvalue", max_eig(&s).to_f64_lossy() - e);
            }
        }
    }
    let all_pass = checks.iter().all(|c| c.pass);
    Ok(CertReport {
        margin,
        checks,
        all_pass,
        achieved,
    })
}

/// Interior-point settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Radius of the ball `‖y‖ < R` that keeps the margin bounded.
    pub radius: f64,
    /// Stop once the barrier gap `θ/η` falls below this.
    pub gap_tol: f64,
    pub max_newton: usize,
    pub growth: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            radius: 1e4,
            gap_tol: 1e-11,
            max_newton: 200,
            growth: 8.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeasibilityResult<T: Real> {
    pub status: FeasibilityStatus,
    pub assignment: Assignment<T>,
    /// Margin in the original scale, from the independent check.
    pub t_star: f64,
    pub report: CertReport,
    pub newton_steps: usize,
}

/// Cone `G(x) = G₀ + Σ xᵢGᵢ ≻ 0` in the solver's variables `x = (y, t)`.
struct Cone {
    g0: DMatrix<f64>,
    gi: Vec<(usize, DMatrix<f64>)>,
}

impl Cone {
    fn at(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut g = self.g0.clone();
        for (i, m) in &self.gi {
            g += m * x[*i];
        }
        g
    }
}

fn sym_basis(n: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::new();
    for i in 0..n {
        for j in i..n {
            let mut e = DMatrix::zeros(n, n);
            e[(i, j)] = 1.0;
            e[(j, i)] = 1.0;
            out.push(e);
        }
    }
    out
}

/// Maximizes the common margin of the strict constraints and certifies
/// the result. Solver arithmetic is `f64`; the check runs in `T`.
pub fn solve_feasibility<T: Real>(
    vars: &[VariableSpec],
    constraints: &[AffineMatrixInequality<T>],
    margin: f64,
    opts: &SolverOptions,
) -> Result<FeasibilityResult<T>, LmiError> {
    let layout = Layout::new(vars)?;
    for c in constraints {
        if c.layout != layout.names {
            return Err(LmiError::LayoutMismatch(c.name.clone()));
        }
    }
    if !constraints.iter().any(|c| c.strict) {
        return Err(LmiError::NoStrictConstraint);
    }
    let d = layout.total;
    let ti = d;
    let to64 = |m: &DMatrix<T>| m.map(|v| v.to_f64_lossy());

    let mut cones = Vec::new();
    let mut scales = Vec::new();
    for c in constraints {
        let f0 = to64(&c.f0);
        let s = 1.0 + f0.norm();
        scales.push(s);
        let mut gi: Vec<(usize, DMatrix<f64>)> = c
            .basis
            .iter()
            .enumerate()
            .filter(|(_, f)| f.iter().any(|v| *v != T::zero()))
            .map(|(i, f)| (i, -to64(f) / s))
            .collect();
        if c.strict {
            gi.push((ti, -DMatrix::identity(c.size, c.size)));
        }
        cones.push(Cone { g0: -f0 / s, gi });
    }
    for (k, v) in vars.iter().enumerate() {
        let off = layout.offsets[k];
        if let Some(lo) = v.lower {
            cones.push(Cone {
                g0: DMatrix::from_element(1, 1, -lo),
                gi: vec![(off, DMatrix::from_element(1, 1, 1.0))],
            });
        }
        if let Some(hi) = v.upper {
            cones.push(Cone {
                g0: DMatrix::from_element(1, 1, hi),
                gi: vec![(off, DMatrix::from_element(1, 1, -1.0))],
            });
        }
        if let VarKind::Symmetric(n) = v.kind {
            let basis = sym_basis(n);
            if let Some(e) = v.min_eig {
                cones.push(Cone {
                    g0: DMatrix::identity(n, n) * -e,
                    gi: basis
                        .iter()
                        .enumerate()
                        .map(|(p, b)| (off + p, b.clone()))
                        .collect(),
                });
            }
            if let Some(e) = v.max_eig {
                cones.push(Cone {
                    g0: DMatrix::identity(n, n) * e,
                    gi: basis
                        .iter()
                        .enumerate()
                        .map(|(p, b)| (off + p, -b.clone()))
                        .collect(),
                });
            }
        }
    }

    let mut start = BTreeMap::new();
    for v in vars {
        start.insert(v.name.clone(), v.start()?);
    }
    let y0 = layout.pack(&start)?;
    let r2 = opts.radius * opts.radius;
    let mut x = DVector::zeros(d + 1);
    x.rows_mut(0, d).copy_from(&y0);
    let mut t0 = f64::INFINITY;
    for (k, c) in constraints.iter().enumerate() {
        if c.strict {
            let f = to64(&c.eval_vec(&y0.map(|v| T::lit(v)))) / scales[k];
            t0 = t0.min(-max_eig(&SymMatrix::symmetrize(f)));
        }
    }
    x[ti] = t0 - 1.0;
    let theta: f64 = cones.iter().map(|c| c.g0.nrows() as f64).sum::<f64>() + 1.0;

    // barrier value, or None outside the domain
    let barrier = |x: &DVector<f64>| -> Option<f64> {
        let mut val = 0.0;
        for c in &cones {
            let ch = c.at(x).cholesky()?;
            val -= 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        }
        let yy = x.rows(0, d).norm_squared();
        if yy >= r2 {
            return None;
        }
        Some(val - (r2 - yy).ln())
    };

    let mut eta = 1.0 / (1.0 + x[ti].abs());
    let mut steps = 0;
    'outer: loop {
        for _ in 0..opts.max_newton {
            let mut g = DVector::zeros(d + 1);
            let mut h = DMatrix::zeros(d + 1, d + 1);
            g[ti] = -eta;
            for c in &cones {
                let ginv = match c.at(&x).cholesky() {
                    Some(ch) => ch.inverse(),
                    None => break 'outer,
                };
                let ms: Vec<(usize, DMatrix<f64>)> =
                    c.gi.iter().map(|(i, m)| (*i, &ginv * m)).collect();
                for (a, (i, mi)) in ms.iter().enumerate() {
                    g[*i] -= mi.trace();
                    for (j, mj) in ms.iter().skip(a) {
                        let mut s = 0.0;
                        for p in 0..mi.nrows() {
                            for q in 0..mi.ncols() {
                                s += mi[(p, q)] * mj[(q, p)];
                            }
                        }
                        h[(*i, *j)] += s;
                        if i != j {
                            h[(*j, *i)] += s;
                        }
                    }
                }
            }
            let y = x.rows(0, d).into_owned();
            let sb = r2 - y.norm_squared();
            for i in 0..d {
                g[i] += 2.0 * y[i] / sb;
                for j in 0..d {
                    h[(i, j)] += 4.0 * y[i] * y[j] / (sb * sb);
                }
                h[(i, i)] += 2.0 / sb;
            }
            let dx = match newton_direction(&h, &g) {
                Some(v) => v,
                None => break 'outer,
            };
            let dec = -g.dot(&dx);
            if !(dec.is_finite()) {
                break 'outer;
            }
            if dec * 0.5 < 1e-10 {
                break;
            }
            let f_now = barrier(&x).map(|b| b - eta * x[ti]);
            let Some(f_now) = f_now else { break 'outer };
            let mut s = 1.0;
            let mut moved = false;
            for _ in 0..60 {
                let xn = &x + &dx * s;
                if let Some(b) = barrier(&xn) {
                    if b - eta * xn[ti] <= f_now - 0.25 * s * dec {
                        x = xn;
                        moved = true;
                        break;
                    }
                }
                s *= 0.5;
            }
            steps += 1;
            if !moved {
                break;
            }
        }
        if theta / eta < opts.gap_tol || eta > 1e16 {
            break;
        }
        eta *= opts.growth;
    }

    let y: DVector<T> = x.rows(0, d).map(|v| T::lit(v));
    let assignment = layout.unpack(&y);
    let report = certify(vars, &assignment, constraints, margin)?;
    let t_star = report.achieved;
    let nonstrict_ok = constraints
        .iter()
        .zip(&report.checks)
        .all(|(c, chk)| c.strict || chk.pass);
    let side_ok = nonstrict_ok && report.checks[constraints.len()..].iter().all(|c| c.pass);
    let status = if side_ok && t_star >= margin {
        FeasibilityStatus::Feasible
    } else if side_ok && t_star > 0.0 {
        FeasibilityStatus::MarginTooSmall
    } else {
        FeasibilityStatus::Infeasible
    };
    Ok(FeasibilityResult {
        status,
        assignment,
        t_star,
        report,
        newton_steps: steps,
    })
}

fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = h.clone().cholesky() {
        let dx = ch.solve(&(-g));
        if dx.iter().all(|v| v.is_finite()) {
            return Some(dx);
        }
    }
    let n = h.nrows();
    let reg = 1e-12 * (1.0 + h.diagonal().abs().max());
    let ch = (h + DMatrix::identity(n, n) * reg).cholesky()?;
    Some(ch.solve(&(-g)))
}

/// Writes the problem in SDPA sparse format: `Σ yᵢ(−Fᵢ) − F₀ ⪰ 0`, one
/// block per constraint, zero objective.
pub fn export_sdpa<T: Real>(
    vars: &[VariableSpec],
    constraints: &[AffineMatrixInequality<T>],
) -> Result<String, LmiError> {
    let layout = Layout::new(vars)?;
    let mut s = String::new();
    let names: Vec<&str> = constraints.iter().map(|c| c.name.as_str()).collect();
    let _ = writeln!(s, "\"feasibility problem: {}\"", names.join(", "));
    let _ = writeln!(s, "{}", layout.total);
    let _ = writeln!(s, "{}", constraints.len());
    let sizes: Vec<String> = constraints.iter().map(|c| c.size.to_string()).collect();
    let _ = writeln!(s, "{}", sizes.join(" "));
    let _ = writeln!(s, "{}", vec!["0"; layout.total].join(" "));
    for (b, c) in constraints.iter().enumerate() {
        if c.layout != layout.names {
            return Err(LmiError::LayoutMismatch(c.name.clone()));
        }
        let mut emit = |mat: usize, m: &DMatrix<T>, sign: f64| {
            for i in 0..m.nrows() {
                for j in i..m.ncols() {
                    let v = m[(i, j)].to_f64_lossy() * sign;
                    if v != 0.0 {
                        let _ = writeln!(s, "{mat} {} {} {} {v:e}", b + 1, i + 1, j + 1);
                    }
                }
            }
        };
        emit(0, &c.f0, 1.0);
        for (i, f) in c.basis.iter().enumerate() {
            emit(i + 1, f, -1.0);
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lyapunov(a: &DMatrix<f64>) -> (Vec<VariableSpec>, AffineMatrixInequality<f64>) {
        let n = a.nrows();
        let vars = vec![VariableSpec::symmetric("P", n).min_eig(1e-6)];
        let mut b = BlockBuilder::new("lyap", vec![n]);
        b.set(0, 0, LinExpr::var("P").lmul(&a.transpose()).sym());
        (vars.clone(), b.build(&vars, true).unwrap())
    }

    #[test]
    fn contradictory_scalar_is_infeasible() {
        let vars = vec![VariableSpec::scalar("x")];
        let mut b = BlockBuilder::<f64>::new("c", vec![1, 1]);
        b.set(0, 0, LinExpr::var("x"));
        b.set(
            1,
            1,
            LinExpr::constant(DMatrix::from_element(1, 1, 1.0)).minus(LinExpr::var("x")),
        );
        let c = b.build(&vars, true).unwrap();
        let r = solve_feasibility(&vars, &[c], 1e-8, &SolverOptions::default()).unwrap();
        assert_eq!(r.status, FeasibilityStatus::Infeasible);
        // best achievable is x = 1/2 with margin −1/2
        assert!((r.t_star + 0.5).abs() < 1e-6, "{}", r.t_star);
    }

    #[test]
    fn lyapunov_of_minus_identity() {
        let a = -DMatrix::<f64>::identity(3, 3);
        let (vars, c) = lyapunov(&a);
        let r = solve_feasibility(&vars, &[c.clone()], 1e-8, &SolverOptions::default()).unwrap();
        assert_eq!(r.status, FeasibilityStatus::Feasible);
        let mut id = Assignment::new();
        id.insert("P".to_string(), DMatrix::identity(3, 3));
        assert!(certify(&vars, &id, &[c], 1e-8).unwrap().all_pass);
    }

    #[test]
    fn lyapunov_matches_analytic_solution() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -3.0]);
        // AᵀP + PA = −I solved as a 3-unknown linear system
        let m = DMatrix::<f64>::from_row_slice(
            3,
            3,
            &[0.0, -4.0, 0.0, 1.0, -3.0, -2.0, 0.0, 2.0, -6.0],
        );
        let p = m
            .lu()
            .solve(&DVector::from_vec(vec![-1.0, 0.0, -1.0]))
            .unwrap();
        let p_exact = DMatrix::from_row_slice(2, 2, &[p[0], p[1], p[1], p[2]]);
        assert!((p_exact[(0, 0)] - 1.25).abs() < 1e-12);
        assert!((p_exact[(0, 1)] - 0.25).abs() < 1e-12);
        assert!((p_exact[(1, 1)] - 0.25).abs() < 1e-12);
        let (vars, c) = lyapunov(&a);
        let mut asg = Assignment::new();
        asg.insert("P".into(), p_exact.clone());
        let f = c.eval(&vars, &asg).unwrap();
        assert!((f + DMatrix::identity(2, 2)).abs().max() < 1e-12);
        let r = solve_feasibility(&vars, &[c], 1e-8, &SolverOptions::default()).unwrap();
        assert_eq!(r.status, FeasibilityStatus::Feasible);
        // the solver's P also solves a Lyapunov equation with some Q ≻ 0
        let ps = &r.assignment["P"];
        let q = -(a.transpose() * ps + ps * &a);
        assert!(-max_eig(&SymMatrix::symmetrize(-q)) > 0.0);
        assert!(r.report.all_pass);
    }

    #[test]
    fn unknown_variable_and_asymmetry_are_reported() {
        let vars = vec![VariableSpec::matrix("L", 2, 2)];
        let mut b = BlockBuilder::<f64>::new("bad", vec![2]);
        b.set(0, 0, LinExpr::var("Q"));
        assert_eq!(
            b.build(&vars, true).unwrap_err(),
            LmiError::UnknownVariable("Q".into())
        );
        let mut b = BlockBuilder::<f64>::new("bad", vec![2]);
        b.set(0, 0, LinExpr::var("L"));
        assert!(matches!(
            b.build(&vars, true),
            Err(LmiError::NotSymmetric { .. })
        ));
        let mut b = BlockBuilder::<f64>::new("bad", vec![3]);
        b.set(0, 0, LinExpr::var("L"));
        assert!(matches!(
            b.build(&vars, true),
            Err(LmiError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn off_diagonal_blocks_mirror() {
        let vars = vec![VariableSpec::matrix("L", 2, 1), VariableSpec::scalar("s")];
        let mut b = BlockBuilder::new("m", vec![2, 1]);
        b.set(0, 0, LinExpr::var("s").lmul(&DMatrix::identity(2, 2)));
        b.set(1, 0, LinExpr::var_t("L"));
        let c = b.build(&vars, true).unwrap();
        let mut a = Assignment::new();
        a.insert("L".into(), DMatrix::from_column_slice(2, 1, &[1.0, 2.0]));
        a.insert("s".into(), DMatrix::from_element(1, 1, 3.0));
        let f = c.eval(&vars, &a).unwrap();
        let want = DMatrix::from_row_slice(3, 3, &[3.0, 0.0, 1.0, 0.0, 3.0, 2.0, 1.0, 2.0, 0.0]);
        assert_eq!(f, want);
    }

    #[test]
    fn side_constraints_are_respected() {
        let a = -DMatrix::<f64>::identity(2, 2);
        let n = 2;
        let vars = vec![VariableSpec::symmetric("P", n).min_eig(0.5).max_eig(0.7)];
        let mut b = BlockBuilder::new("lyap", vec![n]);
        b.set(0, 0, LinExpr::var("P").lmul(&a.transpose()).sym());
        let c = b.build(&vars, true).unwrap();
        let r = solve_feasibility(&vars, &[c], 1e-8, &SolverOptions::default()).unwrap();
        assert_eq!(r.status, FeasibilityStatus::Feasible);
        let e = crate::linalg::sym_eig(&SymMatrix::symmetrize(r.assignment["P"].clone())).unwrap();
        assert!(e.min() > 0.5 && e.max() < 0.7);
    }

    #[test]
    fn sdpa_export_lists_blocks() {
        let a = -DMatrix::<f64>::identity(2, 2);
        let (vars, c) = lyapunov(&a);
        let s = export_sdpa(&vars, &[c]).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[1], "3");
        assert_eq!(lines[2], "1");
        assert_eq!(lines[3], "2");
        assert!(lines.iter().any(|l| l.starts_with("1 1 1 1 ")));
    }
}
