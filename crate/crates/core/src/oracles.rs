//! Closed-form ground-truth functions.
//!
//! Everything here is a pure function of its inputs. The solvers in this crate
//! are checked against these values, so none of them go through the grid.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value, gradient and Hessian of a function at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// `x -> 1/2 x^T A x + b.x + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QuadraticRepr", into = "QuadraticRepr")]
pub struct QuadraticData {
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuadraticRepr {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    c: f64,
}

impl TryFrom<QuadraticRepr> for QuadraticData {
    type Error = Error;

    fn try_from(r: QuadraticRepr) -> Result<Self> {
        let n = r.a.len();
        if r.a.iter().any(|row| row.len() != n) {
            return Err(Error::Validation("quadratic.a must be square".into()));
        }
        let a = DMatrix::from_fn(n, n, |i, j| r.a[i][j]);
        QuadraticData::new(a, DVector::from_vec(r.b), r.c)
    }
}

impl From<QuadraticData> for QuadraticRepr {
    fn from(q: QuadraticData) -> Self {
        let n = q.dim();
        QuadraticRepr {
            a: (0..n).map(|i| (0..n).map(|j| q.a[(i, j)]).collect()).collect(),
            b: q.b.iter().copied().collect(),
            c: q.c,
        }
    }
}

impl QuadraticData {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, c: f64) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.len() != n || n == 0 {
            return Err(Error::Validation(format!(
                "quadratic data shapes disagree: A is {}x{}, b has {} entries",
                a.nrows(),
                a.ncols(),
                b.len()
            )));
        }
        let scale = a.amax().max(1.0);
        if (&a - a.transpose()).amax() > 1e-12 * scale {
            return Err(Error::Validation("quadratic.a must be symmetric".into()));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) || !c.is_finite() {
            return Err(Error::Validation("quadratic data must be finite".into()));
        }
        Ok(Self { a, b, c })
    }

    /// `1/2 |x|^2`.
    pub fn half_norm_squared(dim: usize) -> Self {
        Self {
            a: DMatrix::identity(dim, dim),
            b: DVector::zeros(dim),
            c: 0.0,
        }
    }

    pub fn from_hessian(a: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        Self::new(a, DVector::zeros(n), 0.0)
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn det(&self) -> f64 {
        self.a.determinant()
    }

    pub fn is_positive_definite(&self) -> bool {
        self.a.clone().cholesky().is_some()
    }

    /// SPD with `|det A - 1| <= tol`.
    pub fn is_normalized(&self, tol: f64) -> bool {
        self.is_positive_definite() && (self.det() - 1.0).abs() <= tol
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let n = self.dim();
        let mut v = self.c;
        for i in 0..n {
            v += self.b[i] * x[i];
            let mut ax = 0.0;
            for j in 0..n {
                ax += self.a[(i, j)] * x[j];
            }
            v += 0.5 * x[i] * ax;
        }
        v
    }

    pub fn gradient(&self, x: &[f64]) -> DVector<f64> {
        &self.a * DVector::from_column_slice(x) + &self.b
    }

    /// The polynomial `x -> p(x', 0)`: every coefficient touching `x_n` dropped.
    pub fn bottom_restriction(&self) -> QuadraticData {
        let n = self.dim();
        let mut q = self.clone();
        for i in 0..n {
            q.a[(i, n - 1)] = 0.0;
            q.a[(n - 1, i)] = 0.0;
        }
        q.b[n - 1] = 0.0;
        q
    }

    /// Coefficient-level equality of the two restrictions to `x_n = 0`.
    pub fn compatible_with(&self, other: &QuadraticData, tol: f64) -> bool {
        if self.dim() != other.dim() {
            return false;
        }
        let (p, q) = (self.bottom_restriction(), other.bottom_restriction());
        (p.a - q.a).amax() <= tol && (p.b - q.b).amax() <= tol && (p.c - q.c).abs() <= tol
    }

    /// `self + b_n x_n`.
    pub fn with_normal_slope(&self, b_n: f64) -> QuadraticData {
        let mut q = self.clone();
        let n = q.dim();
        q.b[n - 1] += b_n;
        q
    }
}

pub fn quadratic_eval(q: &QuadraticData, x: &[f64]) -> f64 {
    q.eval(x)
}

fn check_half_space(x: &[f64]) -> Result<()> {
    match x.last() {
        Some(&xn) if xn >= 0.0 => Ok(()),
        Some(&xn) => Err(Error::Domain(format!("x_n = {xn} < 0"))),
        None => Err(Error::Argument("empty point".into())),
    }
}

/// The non-quadratic convex solution of `det D^2 u = 1` with `u = |x'|^2 / 2`
/// on the bottom:
/// `u = x_1^2 / (2 (x_n + 1)) + (x_2^2 + ... + x_{n-1}^2) / 2 + (x_n^3 + 3 x_n^2) / 6`.
pub fn nonquadratic_solution(x: &[f64]) -> Result<Jet> {
    check_half_space(x)?;
    let n = x.len();
    if n < 2 {
        return Err(Error::UnsupportedDimension(n));
    }
    let x1 = x[0];
    let t = x[n - 1] + 1.0;
    let xn = x[n - 1];
    let middle: f64 = x[1..n - 1].iter().map(|v| v * v).sum();
    let value = x1 * x1 / (2.0 * t) + 0.5 * middle + (xn.powi(3) + 3.0 * xn * xn) / 6.0;

    let mut gradient = DVector::zeros(n);
    gradient[0] = x1 / t;
    for i in 1..n - 1 {
        gradient[i] = x[i];
    }
    gradient[n - 1] = -x1 * x1 / (2.0 * t * t) + (xn * xn + 2.0 * xn) / 2.0;

    let mut hessian = DMatrix::zeros(n, n);
    hessian[(0, 0)] = 1.0 / t;
    for i in 1..n - 1 {
        hessian[(i, i)] = 1.0;
    }
    hessian[(0, n - 1)] = -x1 / (t * t);
    hessian[(n - 1, 0)] = -x1 / (t * t);
    hessian[(n - 1, n - 1)] = x1 * x1 / t.powi(3) + t;
    Ok(Jet {
        value,
        gradient,
        hessian,
    })
}

/// Poisson-kernel rate `x_n / |x|^n`.
pub fn poisson_rate(x: &[f64]) -> Result<f64> {
    let r2: f64 = x.iter().map(|v| v * v).sum();
    if r2 == 0.0 {
        return Err(Error::Singularity("poisson_rate at the origin".into()));
    }
    let n = x.len() as i32;
    Ok(x[x.len() - 1] / r2.sqrt().powi(n))
}

/// `poisson_rate` extended by zero at the origin, for sampling on grids
/// where the origin is a bottom node.
pub fn poisson_rate_or_zero(x: &[f64]) -> f64 {
    poisson_rate(x).unwrap_or(0.0)
}

/// Gradient and Hessian of `P(x) = x_n / |x|^n`.
fn poisson_rate_jet(x: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
    let n = x.len();
    let nf = n as f64;
    let r2: f64 = x.iter().map(|v| v * v).sum();
    let r = r2.sqrt();
    let xn = x[n - 1];
    let rn = r.powi(n as i32);
    let p = xn / rn;
    let kd = |i: usize, j: usize| if i == j { 1.0 } else { 0.0 };
    let grad = DVector::from_fn(n, |i, _| kd(i, n - 1) / rn - nf * xn * x[i] / (rn * r2));
    let hess = DMatrix::from_fn(n, n, |i, j| {
        -nf * (kd(i, n - 1) * x[j] + kd(j, n - 1) * x[i] + kd(i, j) * xn) / (rn * r2)
            + nf * (nf + 2.0) * xn * x[i] * x[j] / (rn * r2 * r2)
    });
    (p, grad, hess)
}

/// Parameters of the barrier `w = P - P^{1+delta}`, `P = x_n / |x|^n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierSpec {
    pub delta: f64,
    /// Decay exponent of the coefficient perturbation, `|a_ij - delta_ij| <= |x|^{-s}`.
    pub s: f64,
    /// Radius beyond which the supersolution inequality is asserted.
    pub r1: f64,
}

impl BarrierSpec {
    /// `delta` centered in the admissible interval `(0, min(1, s/(dim-1)))`.
    pub fn with_default_delta(s: f64, r1: f64, dim: usize) -> Self {
        let delta = 0.5 * (s / (dim as f64 - 1.0)).min(1.0);
        Self { delta, s, r1 }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.s > 0.0) {
            return Err(Error::Validation(format!("barrier.s must be positive, got {}", self.s)));
        }
        let bound = (self.s / (dim as f64 - 1.0)).min(1.0);
        if !(self.delta > 0.0 && self.delta < bound) {
            return Err(Error::Validation(format!(
                "barrier.delta = {} outside (0, min(1, s/(n-1))) = (0, {bound})",
                self.delta
            )));
        }
        if !(self.r1 > 0.0) {
            return Err(Error::Validation(format!("barrier.r1 must be positive, got {}", self.r1)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarrierJet {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
    /// From the closed-form Laplacian, not from the Hessian trace.
    pub laplacian: f64,
}

/// Value of the barrier; defined on the closed half space minus the origin.
pub fn barrier_value(x: &[f64], spec: &BarrierSpec) -> Result<f64> {
    check_half_space(x)?;
    let p = poisson_rate(x)?;
    Ok(p - p.powf(1.0 + spec.delta))
}

/// Barrier value with first and second derivatives; requires `x_n > 0`.
pub fn barrier_w(x: &[f64], spec: &BarrierSpec) -> Result<BarrierJet> {
    let n = x.len();
    if n < 2 {
        return Err(Error::UnsupportedDimension(n));
    }
    let r2: f64 = x.iter().map(|v| v * v).sum();
    if r2 == 0.0 {
        return Err(Error::Singularity("barrier at the origin".into()));
    }
    if !(x[n - 1] > 0.0) {
        return Err(Error::Domain(format!(
            "barrier derivatives need x_n > 0, got {}",
            x[n - 1]
        )));
    }
    let d = spec.delta;
    let nf = n as f64;
    let xn = x[n - 1];
    let (p, dp, d2p) = poisson_rate_jet(x);
    let outer = 1.0 - (1.0 + d) * p.powf(d);
    let curvature = -d * (1.0 + d) * p.powf(d - 1.0);
    let value = p - p.powf(1.0 + d);
    let gradient = &dp * outer;
    let hessian = &d2p * outer + (&dp * dp.transpose()) * curvature;
    let r2n = r2.powi(n as i32);
    let laplacian = curvature * (1.0 / r2n + (nf * nf - 2.0 * nf) * xn * xn / (r2n * r2));
    Ok(BarrierJet {
        value,
        gradient,
        hessian,
        laplacian,
    })
}

/// Which side of the `u_+ <= 1/2|x|^2 <= u_-` sandwich a profile builds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileSide {
    /// `0 <= f_+ <= 1`.
    Plus,
    /// `1 <= f_- <= Lambda`.
    Minus,
}

#[derive(Clone)]
pub enum ProfileShape {
    /// Constant value on `[0, 1]`, one afterwards.
    PiecewiseConstant(f64),
    /// Arbitrary values on `[0, 1]`, one afterwards.
    Function(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for ProfileShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProfileShape::PiecewiseConstant(v) => write!(f, "PiecewiseConstant({v})"),
            ProfileShape::Function(_) => write!(f, "Function(..)"),
        }
    }
}

/// One-dimensional source profile `f_+-(s)` with `supp(f - 1) in [0, 1]`.
#[derive(Debug, Clone)]
pub struct SourceProfile {
    pub side: ProfileSide,
    pub shape: ProfileShape,
    /// Global upper bound `Lambda >= 1`.
    pub big_lambda: f64,
}

impl SourceProfile {
    pub fn constant(side: ProfileSide, value: f64, big_lambda: f64) -> Self {
        Self {
            side,
            shape: ProfileShape::PiecewiseConstant(value),
            big_lambda,
        }
    }

    pub fn function(
        side: ProfileSide,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        big_lambda: f64,
    ) -> Self {
        Self {
            side,
            shape: ProfileShape::Function(Arc::new(f)),
            big_lambda,
        }
    }

    pub fn eval(&self, s: f64) -> f64 {
        if !(0.0..=1.0).contains(&s) {
            return 1.0;
        }
        match &self.shape {
            ProfileShape::PiecewiseConstant(v) => *v,
            ProfileShape::Function(f) => f(s),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.big_lambda >= 1.0) {
            return Err(Error::Validation(format!(
                "profile Lambda = {} must be >= 1",
                self.big_lambda
            )));
        }
        let (lo, hi) = match self.side {
            ProfileSide::Plus => (0.0, 1.0),
            ProfileSide::Minus => (1.0, self.big_lambda),
        };
        let check = |v: f64, s: f64| {
            if v.is_finite() && v >= lo && v <= hi {
                Ok(())
            } else {
                Err(Error::Validation(format!(
                    "profile value {v} at s = {s} outside [{lo}, {hi}]"
                )))
            }
        };
        match &self.shape {
            ProfileShape::PiecewiseConstant(v) => check(*v, 0.0),
            ProfileShape::Function(f) => (0..=1000).try_for_each(|k| {
                let s = k as f64 / 1000.0;
                check(f(s), s)
            }),
        }
    }
}

/// Adaptive Simpson quadrature.
fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    if b <= a {
        return 0.0;
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = simpson(fa, fm, fb, a, b);
    recurse(f, a, b, fa, fm, fb, whole, tol, 48)
}

/// `int_0^{x_n} int_0^t f(s) ds dt = x_n^2/2 + int_0^{min(x_n,1)} (x_n - s)(f(s) - 1) ds`.
fn double_integral(xn: f64, profile: &SourceProfile) -> f64 {
    let top = xn.min(1.0);
    let correction = match &profile.shape {
        ProfileShape::PiecewiseConstant(v) => (v - 1.0) * (xn * top - 0.5 * top * top),
        ProfileShape::Function(f) => {
            let g = |s: f64| (xn - s) * (f(s) - 1.0);
            adaptive_simpson(&g, 0.0, top, 1e-12)
        }
    };
    0.5 * xn * xn + correction
}

/// `u_+-(x) = |x'|^2/2 + int_0^{x_n} int_0^t f_+-(s) ds dt`.
pub fn u_pm(x: &[f64], profile: &SourceProfile) -> Result<f64> {
    check_half_space(x)?;
    profile.validate()?;
    let n = x.len();
    let tangential: f64 = x[..n - 1].iter().map(|v| v * v).sum();
    Ok(0.5 * tangential + double_integral(x[n - 1], profile))
}

/// `D_n u_+-(x) = int_0^{x_n} f_+-(s) ds`.
pub fn u_pm_normal_derivative(x: &[f64], profile: &SourceProfile) -> Result<f64> {
    check_half_space(x)?;
    profile.validate()?;
    let xn = x[x.len() - 1];
    let top = xn.min(1.0);
    let correction = match &profile.shape {
        ProfileShape::PiecewiseConstant(v) => (v - 1.0) * top,
        ProfileShape::Function(f) => adaptive_simpson(&|s| f(s) - 1.0, 0.0, top, 1e-12),
    };
    Ok(xn + correction)
}
