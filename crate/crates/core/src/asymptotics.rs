//! Far-field analysis of solved fields: quadratic asymptote fitting, decay
//! rates of the remainder and its derivatives, and the level-set (section)
//! geometry used to normalize solutions by upper-triangular maps.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::grid::{HalfGrid, NodeClass};
use crate::ma::{solve_ma_masked, SolverConfig, SourceTerm};
use crate::oracles::QuadraticData;

/// Exponent used by the section envelope checks. Fixed, never fitted.
pub const TAU: f64 = 0.1;

/// Samples at or below this magnitude are treated as numerically zero.
pub const UNDERFLOW_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// `|V(r w)|` along a unit direction with `w_n > 0`.
    Ray(Vec<f64>),
    /// `sup |V|` over spherical shells.
    Annulus,
    /// `sup |V(x', h)| / h` over `|x'| = r`.
    BottomNormalized,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayFit {
    pub exponent: f64,
    pub constant: f64,
    /// Largest deviation of `ln|V|` from the fitted line.
    pub fit_residual: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub mode: DecayMode,
    pub samples: Vec<(f64, f64)>,
}

/// A decay measurement either fits a power law or reports that the samples
/// are at the noise floor.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecayOutcome {
    Fit(DecayFit),
    Underflow {
        mode: DecayMode,
        r_min: f64,
        r_max: f64,
        max_abs: f64,
        /// Every sample is below the floor.
        exact_zero: bool,
    },
}

impl DecayOutcome {
    pub fn exponent(&self) -> Option<f64> {
        match self {
            DecayOutcome::Fit(f) => Some(f.exponent),
            DecayOutcome::Underflow { .. } => None,
        }
    }

    pub fn is_exact_zero(&self) -> bool {
        matches!(self, DecayOutcome::Underflow { exact_zero: true, .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayOptions {
    pub radii: usize,
    pub floor: f64,
}

impl Default for DecayOptions {
    fn default() -> Self {
        Self {
            radii: 9,
            floor: UNDERFLOW_FLOOR,
        }
    }
}

/// Least-squares slope and intercept of `y` against `x`.
pub fn linear_regression(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    linear_regression(&lx, &ly).0
}

fn geometric_radii(r_min: f64, r_max: f64, count: usize) -> Vec<f64> {
    let ratio = (r_max / r_min).powf(1.0 / (count - 1) as f64);
    (0..count).map(|k| r_min * ratio.powi(k as i32)).collect()
}

fn fit_samples(samples: Vec<(f64, f64)>, mode: DecayMode, r_min: f64, r_max: f64, floor: f64) -> DecayOutcome {
    let max_abs = samples.iter().fold(0.0f64, |m, s| m.max(s.1));
    if samples.iter().any(|s| !(s.1 > floor)) {
        return DecayOutcome::Underflow {
            mode,
            r_min,
            r_max,
            max_abs,
            exact_zero: samples.iter().all(|s| !(s.1 > floor)),
        };
    }
    let lx: Vec<f64> = samples.iter().map(|s| s.0.ln()).collect();
    let ly: Vec<f64> = samples.iter().map(|s| s.1.ln()).collect();
    let (slope, intercept) = linear_regression(&lx, &ly);
    let fit_residual = lx
        .iter()
        .zip(&ly)
        .map(|(a, b)| (b - (intercept + slope * a)).abs())
        .fold(0.0, f64::max);
    DecayOutcome::Fit(DecayFit {
        exponent: slope,
        constant: intercept.exp(),
        fit_residual,
        r_min,
        r_max,
        mode,
        samples,
    })
}

fn unit_direction(dir: &[f64], dim: usize) -> Result<Vec<f64>> {
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if dir.len() != dim || !(norm > 0.0) || !(dir[dim - 1] > 0.0) {
        return Err(Error::Argument(format!(
            "ray direction {dir:?} must be a nonzero {dim}-vector with positive last component"
        )));
    }
    Ok(dir.iter().map(|v| v / norm).collect())
}

fn sample_at(v: &ScalarField, x: &[f64]) -> Result<f64> {
    v.interpolate(x)
        .ok_or_else(|| Error::Argument(format!("sample point {x:?} lies outside the grid")))
}

/// Bottom circle `|x'| = r` at height `x_n`.
fn bottom_circle(dim: usize, r: f64, height: f64) -> Vec<Vec<f64>> {
    if dim == 2 {
        vec![vec![-r, height], vec![r, height]]
    } else {
        (0..16)
            .map(|k| {
                let phi = std::f64::consts::TAU * k as f64 / 16.0;
                vec![r * phi.cos(), r * phi.sin(), height]
            })
            .collect()
    }
}

pub fn decay_exponent(v: &ScalarField, mode: &DecayMode, range: (f64, f64)) -> Result<DecayOutcome> {
    decay_exponent_with(v, mode, range, DecayOptions::default())
}

pub fn decay_exponent_with(
    v: &ScalarField,
    mode: &DecayMode,
    range: (f64, f64),
    opts: DecayOptions,
) -> Result<DecayOutcome> {
    let (r_min, r_max) = range;
    if !(r_min > 0.0 && r_max > r_min) {
        return Err(Error::Argument(format!("decay range needs 0 < r_min < r_max, got {range:?}")));
    }
    if opts.radii < 5 {
        return Err(Error::Argument("decay fits need at least 5 sample radii".into()));
    }
    let grid = v.grid();
    let dim = grid.dim();
    let h = grid.spacing();
    let radii = geometric_radii(r_min, r_max, opts.radii);
    let (samples, mode) = match mode {
        DecayMode::Ray(dir) => {
            let w = unit_direction(dir, dim)?;
            let mut s = Vec::new();
            for &r in &radii {
                let x: Vec<f64> = w.iter().map(|c| c * r).collect();
                s.push((r, sample_at(v, &x)?.abs()));
            }
            (s, DecayMode::Ray(w))
        }
        DecayMode::BottomNormalized => {
            let mut s = Vec::new();
            for &r in &radii {
                let mut worst = 0.0f64;
                for x in bottom_circle(dim, r, h) {
                    worst = worst.max(sample_at(v, &x)?.abs() / h);
                }
                s.push((r, worst));
            }
            (s, DecayMode::BottomNormalized)
        }
        DecayMode::Annulus => {
            let mut sup = vec![0.0f64; radii.len() - 1];
            let mut hit = vec![false; radii.len() - 1];
            for node in 0..grid.len() {
                let r = grid.radius(node);
                if r < r_min || r >= r_max {
                    continue;
                }
                let k = radii.partition_point(|&rk| rk <= r) - 1;
                let k = k.min(sup.len() - 1);
                sup[k] = sup[k].max(v.get(node).abs());
                hit[k] = true;
            }
            if hit.iter().any(|h| !h) {
                return Err(Error::Argument("an annulus shell contains no grid nodes".into()));
            }
            let s = radii
                .windows(2)
                .zip(sup)
                .map(|(w, m)| ((w[0] * w[1]).sqrt(), m))
                .collect();
            (s, DecayMode::Annulus)
        }
    };
    Ok(fit_samples(samples, mode, r_min, r_max, opts.floor))
}

/// Where the bottom polynomial of a constrained fit comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum BottomConstraint {
    Free,
    /// Pin the restriction to `x_n = 0` to this polynomial's restriction.
    Known(QuadraticData),
    /// Fit the bottom polynomial to the field's own bottom values first.
    FromField,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub constraint: BottomConstraint,
    /// Add `x_n / |x|^n` as a nuisance regressor (not part of the returned
    /// quadratic).
    pub kernel_term: bool,
}

impl FitOptions {
    pub fn free() -> Self {
        Self {
            constraint: BottomConstraint::Free,
            kernel_term: false,
        }
    }

    pub fn constrained() -> Self {
        Self {
            constraint: BottomConstraint::FromField,
            kernel_term: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoteFit {
    pub q: QuadraticData,
    pub kernel_coefficient: Option<f64>,
    /// Root-mean-square misfit over the fitting nodes.
    pub rms: f64,
    pub nodes: usize,
}

#[derive(Debug, Clone, Copy)]
enum Coef {
    A(usize, usize),
    B(usize),
    C,
    Kernel,
}

fn basis_value(coef: Coef, x: &[f64]) -> f64 {
    match coef {
        Coef::A(i, j) if i == j => 0.5 * x[i] * x[i],
        Coef::A(i, j) => x[i] * x[j],
        Coef::B(i) => x[i],
        Coef::C => 1.0,
        Coef::Kernel => {
            let n = x.len();
            let r2: f64 = x.iter().map(|v| v * v).sum();
            if r2 == 0.0 {
                0.0
            } else {
                x[n - 1] / r2.powf(n as f64 / 2.0)
            }
        }
    }
}

/// Scaled least squares with a rank check; returns coefficients and rms.
fn least_squares(rows: &[Vec<f64>], y: &[f64]) -> std::result::Result<(Vec<f64>, f64), String> {
    let m = rows.len();
    let n = rows.first().map_or(0, |r| r.len());
    if n == 0 {
        return Ok((Vec::new(), (y.iter().map(|v| v * v).sum::<f64>() / m.max(1) as f64).sqrt()));
    }
    let mut x = DMatrix::from_fn(m, n, |i, j| rows[i][j]);
    let scales: Vec<f64> = (0..n)
        .map(|j| {
            let s = x.column(j).norm();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    for (j, s) in scales.iter().enumerate() {
        x.column_mut(j).scale_mut(1.0 / s);
    }
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-10 * smax) {
        return Err(format!("normal system is rank deficient (singular values {smin:.3e} / {smax:.3e})"));
    }
    let yv = DVector::from_column_slice(y);
    let beta = svd.solve(&yv, 0.0).map_err(|e| e.to_string())?;
    let resid = &yv - &x * &beta;
    let rms = (resid.norm_squared() / m as f64).sqrt();
    Ok(((0..n).map(|j| beta[j] / scales[j]).collect(), rms))
}

/// Bottom polynomial fitted to the field's values on `x_n = 0`.
fn bottom_polynomial(field: &ScalarField) -> Result<QuadraticData> {
    let grid = field.grid();
    let dim = grid.dim();
    let mut coefs = Vec::new();
    for i in 0..dim - 1 {
        for j in i..dim - 1 {
            coefs.push(Coef::A(i, j));
        }
        coefs.push(Coef::B(i));
    }
    coefs.push(Coef::C);
    let nodes = grid.nodes_of_class(NodeClass::Bottom);
    let rows: Vec<Vec<f64>> = nodes
        .iter()
        .map(|&i| {
            let x = grid.coords(i);
            coefs.iter().map(|&c| basis_value(c, &x)).collect()
        })
        .collect();
    let y: Vec<f64> = nodes.iter().map(|&i| field.get(i)).collect();
    let (beta, _) = least_squares(&rows, &y).map_err(Error::DegenerateAnnulus)?;
    assemble(dim, &coefs, &beta, None)
}

fn assemble(dim: usize, coefs: &[Coef], beta: &[f64], base: Option<&QuadraticData>) -> Result<QuadraticData> {
    let mut a = base.map_or_else(|| DMatrix::zeros(dim, dim), |q| q.a().clone());
    let mut b = base.map_or_else(|| DVector::zeros(dim), |q| q.b().clone());
    let mut c = base.map_or(0.0, |q| q.c());
    for (&coef, &v) in coefs.iter().zip(beta) {
        match coef {
            Coef::A(i, j) => {
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
            Coef::B(i) => b[i] = v,
            Coef::C => c = v,
            Coef::Kernel => {}
        }
    }
    QuadraticData::new(a, b, c)
}

/// Least-squares fit of `1/2 x^T A x + b.x + c` over `nodes`.
pub fn fit_quadratic_asymptote(field: &ScalarField, nodes: &[usize], opts: &FitOptions) -> Result<AsymptoteFit> {
    let grid = field.grid();
    let dim = grid.dim();
    let n = dim - 1;
    let base = match &opts.constraint {
        BottomConstraint::Free => None,
        BottomConstraint::Known(p) => {
            if p.dim() != dim {
                return Err(Error::Argument("bottom polynomial dimension differs from grid".into()));
            }
            Some(p.bottom_restriction())
        }
        BottomConstraint::FromField => Some(bottom_polynomial(field)?),
    };
    let mut coefs = Vec::new();
    if base.is_some() {
        for i in 0..dim {
            coefs.push(Coef::A(i, n));
        }
        coefs.push(Coef::B(n));
    } else {
        for i in 0..dim {
            for j in i..dim {
                coefs.push(Coef::A(i, j));
            }
        }
        for i in 0..dim {
            coefs.push(Coef::B(i));
        }
        coefs.push(Coef::C);
    }
    if opts.kernel_term {
        coefs.push(Coef::Kernel);
    }
    if nodes.len() < 3 * coefs.len() {
        return Err(Error::DegenerateAnnulus(format!(
            "{} nodes for {} free coefficients (need 3x)",
            nodes.len(),
            coefs.len()
        )));
    }
    let mut rows = Vec::with_capacity(nodes.len());
    let mut y = Vec::with_capacity(nodes.len());
    for &node in nodes {
        let x = grid.coords(node);
        rows.push(coefs.iter().map(|&c| basis_value(c, &x)).collect::<Vec<f64>>());
        y.push(field.get(node) - base.as_ref().map_or(0.0, |q| q.eval(&x)));
    }
    let (beta, rms) = least_squares(&rows, &y).map_err(Error::DegenerateAnnulus)?;
    let q = assemble(dim, &coefs, &beta, base.as_ref())?;
    let kernel_coefficient = opts.kernel_term.then(|| *beta.last().unwrap());
    Ok(AsymptoteFit {
        q,
        kernel_coefficient,
        rms,
        nodes: nodes.len(),
    })
}

/// Fits `u - q ≈ b_n x_n + κ x_n / |x|^n` over `nodes` with `q` known;
/// returns `(b_n, κ)`.
pub fn fit_normal_slope(field: &ScalarField, q: &QuadraticData, nodes: &[usize]) -> Result<(f64, f64)> {
    let grid = field.grid();
    let n = grid.dim() - 1;
    if nodes.len() < 6 {
        return Err(Error::DegenerateAnnulus(format!("{} nodes for 2 coefficients", nodes.len())));
    }
    let mut rows = Vec::with_capacity(nodes.len());
    let mut y = Vec::with_capacity(nodes.len());
    for &node in nodes {
        let x = grid.coords(node);
        rows.push(vec![basis_value(Coef::B(n), &x), basis_value(Coef::Kernel, &x)]);
        y.push(field.get(node) - q.eval(&x));
    }
    let (beta, _) = least_squares(&rows, &y).map_err(Error::DegenerateAnnulus)?;
    Ok((beta[0], beta[1]))
}

/// Pointwise `u - q`.
pub fn residual_field(field: &ScalarField, q: &QuadraticData) -> Result<ScalarField> {
    let grid = field.grid();
    if q.dim() != grid.dim() {
        return Err(Error::Argument("quadratic dimension differs from grid".into()));
    }
    field.map(|i, v| v - q.eval(&grid.coords(i)))
}

/// Magnitude of the `k`-th derivative of the interpolated field at `x` by
/// central differences with step `eta`: Euclidean norm of the gradient for
/// `k = 1`, Frobenius norm of the Hessian for `k = 2`.
fn derivative_norm(v: &ScalarField, x: &[f64], k: usize, eta: f64) -> Result<f64> {
    let dim = x.len();
    let at = |shift: &[(usize, f64)]| -> Result<f64> {
        let mut y = x.to_vec();
        for &(a, s) in shift {
            y[a] += s;
        }
        sample_at(v, &y)
    };
    if k == 1 {
        let mut total = 0.0;
        for a in 0..dim {
            let d = (at(&[(a, eta)])? - at(&[(a, -eta)])?) / (2.0 * eta);
            total += d * d;
        }
        return Ok(total.sqrt());
    }
    let center = at(&[])?;
    let mut total = 0.0;
    for a in 0..dim {
        let d = (at(&[(a, eta)])? - 2.0 * center + at(&[(a, -eta)])?) / (eta * eta);
        total += d * d;
        for b in a + 1..dim {
            let d = (at(&[(a, eta), (b, eta)])? - at(&[(a, eta), (b, -eta)])? - at(&[(a, -eta), (b, eta)])?
                + at(&[(a, -eta), (b, -eta)])?)
                / (4.0 * eta * eta);
            total += 2.0 * d * d;
        }
    }
    Ok(total.sqrt())
}

/// Ray-mode decay of `|D^k (u - q)|`; the expected slope for the
/// `x_n / |x|^n` profile is `1 - n - k`.
pub fn derivative_decay(
    field: &ScalarField,
    q: &QuadraticData,
    k: usize,
    direction: &[f64],
    range: (f64, f64),
) -> Result<DecayOutcome> {
    if !(1..=2).contains(&k) {
        return Err(Error::Unsupported(format!(
            "derivative order {k}; only k = 1, 2 are resolvable on the grid"
        )));
    }
    let (r_min, r_max) = range;
    if !(r_min > 0.0 && r_max > r_min) {
        return Err(Error::Argument(format!("decay range needs 0 < r_min < r_max, got {range:?}")));
    }
    let v = residual_field(field, q)?;
    let dim = field.grid().dim();
    let h = field.grid().spacing();
    let w = unit_direction(direction, dim)?;
    let opts = DecayOptions::default();
    let mut samples = Vec::new();
    for r in geometric_radii(r_min, r_max, opts.radii) {
        let x: Vec<f64> = w.iter().map(|c| c * r).collect();
        samples.push((r, derivative_norm(&v, &x, k, h)?));
    }
    // differences of a field at the floor sit at floor / h^k
    let floor = opts.floor / h.powi(k as i32);
    Ok(fit_samples(samples, DecayMode::Ray(w), r_min, r_max, floor))
}

/// Sublevel set `{u < M}`: nodes plus level crossings on grid edges.
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub level: f64,
    pub nodes: Vec<usize>,
    pub boundary: Vec<Vec<f64>>,
}

/// Root of the quadratic through `(t_k, v_k)` equal to `level` in `[0, 1]`,
/// closest to the linear estimate.
fn edge_crossing(ts: [f64; 3], vs: [f64; 3], level: f64) -> f64 {
    let linear = (level - vs[0]) / (vs[1] - vs[0]);
    // Newton form through the three samples
    let d01 = (vs[1] - vs[0]) / (ts[1] - ts[0]);
    let d12 = (vs[2] - vs[1]) / (ts[2] - ts[1]);
    let d012 = (d12 - d01) / (ts[2] - ts[0]);
    // p(t) = v0 + d01 t + d012 t (t - 1), with t0 = 0, t1 = 1
    let a = d012;
    let b = d01 - d012;
    let c = vs[0] - level;
    let mut best = linear;
    if a.abs() > 1e-14 * (b.abs() + c.abs()) {
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            let q = -0.5 * (b + b.signum() * sq);
            let roots = [q / a, if q != 0.0 { c / q } else { f64::NAN }];
            let mut found = None;
            for t in roots {
                if (-1e-9..=1.0 + 1e-9).contains(&t) {
                    let better = found.map_or(true, |f: f64| (t - linear).abs() < (f - linear).abs());
                    if better {
                        found = Some(t);
                    }
                }
            }
            if let Some(t) = found {
                best = t;
            }
        }
    }
    best.clamp(0.0, 1.0)
}

/// Nodes with `u < M` and the crossing points of the level `M` on grid
/// edges (quadratic interpolation along the edge's grid line).
pub fn extract_section(field: &ScalarField, level: f64) -> Result<Section> {
    let grid = field.grid();
    let nodes: Vec<usize> = (0..grid.len()).filter(|&i| field.get(i) < level).collect();
    if nodes.is_empty() {
        return Err(Error::Level(format!("section at level {level} is empty")));
    }
    if let Some(&i) = nodes.iter().find(|&&i| grid.class(i) == NodeClass::Outer) {
        return Err(Error::Level(format!(
            "section at level {level} reaches the outer boundary at {:?}",
            grid.coords(i)
        )));
    }
    let h = grid.spacing();
    let mut boundary = Vec::new();
    for i in 0..grid.len() {
        for axis in 0..grid.dim() {
            let Some(j) = grid.neighbor(i, axis, 1) else { continue };
            let (vi, vj) = (field.get(i), field.get(j));
            if (vi < level) == (vj < level) {
                continue;
            }
            // parametrize from the inside node a to the outside node b
            let (a, b, dir) = if vi < level { (i, j, 1isize) } else { (j, i, -1isize) };
            let t = if let Some(c) = grid.neighbor(b, axis, dir) {
                edge_crossing([0.0, 1.0, 2.0], [field.get(a), field.get(b), field.get(c)], level)
            } else if let Some(c) = grid.neighbor(a, axis, -dir) {
                edge_crossing([0.0, 1.0, -1.0], [field.get(a), field.get(b), field.get(c)], level)
            } else {
                (level - field.get(a)) / (field.get(b) - field.get(a))
            };
            let mut x = grid.coords(a);
            x[axis] += dir as f64 * t * h;
            boundary.push(x);
        }
    }
    Ok(Section {
        level,
        nodes,
        boundary,
    })
}

/// Every section node lies in the convex hull of the level crossings, up to
/// `tol`. Two-dimensional grids only.
pub fn section_convexity_check(field: &ScalarField, section: &Section, tol: f64) -> Result<bool> {
    let grid = field.grid();
    if grid.dim() != 2 {
        return Err(Error::Unsupported("convexity check is implemented for dim 2".into()));
    }
    let hull = convex_hull(&section.boundary);
    if hull.len() < 3 {
        return Err(Error::DegenerateSection("fewer than 3 hull vertices".into()));
    }
    Ok(section.nodes.iter().all(|&i| {
        let p = [grid.coord(i, 0), grid.coord(i, 1)];
        distance_to_hull(&hull, p) <= tol
    }))
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise hull (monotone chain).
fn convex_hull(points: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let mut p: Vec<[f64; 2]> = points.iter().map(|v| [v[0], v[1]]).collect();
    p.sort_by(|a, b| a.partial_cmp(b).unwrap());
    p.dedup();
    if p.len() < 3 {
        return p;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * p.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 { Box::new(p.iter()) } else { Box::new(p.iter().rev()) };
        for &q in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], q) <= 0.0 {
                hull.pop();
            }
            hull.push(q);
        }
        hull.pop();
    }
    hull
}

fn distance_to_hull(hull: &[[f64; 2]], p: [f64; 2]) -> f64 {
    let n = hull.len();
    let inside = (0..n).all(|k| cross(hull[k], hull[(k + 1) % n], p) >= 0.0);
    if inside {
        return 0.0;
    }
    (0..n)
        .map(|k| {
            let (a, b) = (hull[k], hull[(k + 1) % n]);
            let ab = [b[0] - a[0], b[1] - a[1]];
            let ap = [p[0] - a[0], p[1] - a[1]];
            let len2 = ab[0] * ab[0] + ab[1] * ab[1];
            let t = if len2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
            (d[0] * d[0] + d[1] * d[1]).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Algebraic least-squares fit of `x^T H x = 1`. With `reflect`, each point
/// is paired with its mirror image `-x` before fitting.
pub fn ellipsoid_fit(points: &[Vec<f64>], reflect: bool) -> Result<DMatrix<f64>> {
    let dim = points.first().map_or(0, |p| p.len());
    if !(2..=3).contains(&dim) || points.iter().any(|p| p.len() != dim) {
        return Err(Error::DegenerateSection("points must share dimension 2 or 3".into()));
    }
    let unknowns = dim * (dim + 1) / 2;
    if points.len() < unknowns {
        return Err(Error::DegenerateSection(format!(
            "{} points for {unknowns} ellipsoid coefficients",
            points.len()
        )));
    }
    let mut cloud: Vec<Vec<f64>> = points.to_vec();
    if reflect {
        cloud.extend(points.iter().map(|p| p.iter().map(|v| -v).collect::<Vec<f64>>()));
    }
    let rows: Vec<Vec<f64>> = cloud
        .iter()
        .map(|x| {
            let mut row = Vec::with_capacity(unknowns);
            for i in 0..dim {
                for j in i..dim {
                    row.push(if i == j { x[i] * x[i] } else { 2.0 * x[i] * x[j] });
                }
            }
            row
        })
        .collect();
    let ones = vec![1.0; rows.len()];
    let (beta, _) = least_squares(&rows, &ones).map_err(Error::DegenerateSection)?;
    let mut h = DMatrix::zeros(dim, dim);
    let mut k = 0;
    for i in 0..dim {
        for j in i..dim {
            h[(i, j)] = beta[k];
            h[(j, i)] = beta[k];
            k += 1;
        }
    }
    if h.clone().cholesky().is_none() {
        return Err(Error::DegenerateSection(format!("fitted matrix is not positive definite: {h}")));
    }
    Ok(h)
}

/// Upper-triangular `T` with positive diagonal and `T^T T = H`.
pub fn lu_normalize(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = h.nrows();
    if h.ncols() != n || n == 0 {
        return Err(Error::Factorization("matrix must be square".into()));
    }
    let scale = h.amax().max(f64::MIN_POSITIVE);
    if (h - h.transpose()).amax() > 1e-12 * scale {
        return Err(Error::Factorization("matrix is not symmetric".into()));
    }
    // row k of T: T_kk^2 = H_kk - sum_{m<k} T_mk^2, T_kj = (H_kj - sum_{m<k} T_mk T_mj) / T_kk
    let mut t = DMatrix::zeros(n, n);
    for k in 0..n {
        let mut d = h[(k, k)];
        for m in 0..k {
            d -= t[(m, k)] * t[(m, k)];
        }
        if !(d > 0.0) {
            return Err(Error::Factorization(format!("matrix is not positive definite (pivot {d:.3e})")));
        }
        let tkk = d.sqrt();
        t[(k, k)] = tkk;
        for j in k + 1..n {
            let mut s = h[(k, j)];
            for m in 0..k {
                s -= t[(m, k)] * t[(m, j)];
            }
            t[(k, j)] = s / tkk;
        }
    }
    Ok(t)
}

/// Converts a fit `x^T H x = 1` of the level set `{u = M}` to the Hessian of
/// a quadratic with that level set, `2 M H`.
pub fn hessian_from_fit(h_fit: &DMatrix<f64>, level: f64) -> DMatrix<f64> {
    h_fit * (2.0 * level)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichReport {
    pub level: f64,
    pub inner_level: f64,
    pub slack: f64,
    /// Smallest `M' - u` over nodes of the shrunken ellipsoid (positive = ok).
    pub inner_margin: f64,
    /// Smallest gap to the enlarged ellipsoid over section nodes.
    pub outer_margin: f64,
    pub inner_ok: bool,
    pub outer_ok: bool,
    /// Smallest slack for which both inclusions hold on this grid.
    pub min_passing_slack: f64,
    pub passed: bool,
}

/// Checks `(2M'/M - s)^{1/2} E ⊂ S_{M'}/√M ⊂ (2M'/M + s)^{1/2} E` on grid
/// nodes, with `E = {y : y^T H y <= 1}`.
pub fn section_sandwich_check(
    field: &ScalarField,
    level: f64,
    inner_level: f64,
    h: &DMatrix<f64>,
    slack: f64,
) -> Result<SandwichReport> {
    if !(level >= inner_level && inner_level > 0.0) {
        return Err(Error::Argument(format!(
            "sandwich needs M >= M' > 0, got M = {level}, M' = {inner_level}"
        )));
    }
    let grid = field.grid();
    let dim = grid.dim();
    if h.clone().cholesky().is_none() || h.nrows() != dim {
        return Err(Error::Argument("sandwich matrix must be SPD of the grid dimension".into()));
    }
    let ratio = 2.0 * inner_level / level;
    let mut inner_margin = f64::INFINITY;
    let mut outer_margin = f64::INFINITY;
    // smallest form value outside the section, largest inside
    let mut min_form_outside = f64::INFINITY;
    let mut max_form_inside = f64::NEG_INFINITY;
    let mut y = DVector::zeros(dim);
    for node in 0..grid.len() {
        for a in 0..dim {
            y[a] = grid.coord(node, a) / level.sqrt();
        }
        let form = (h * &y).dot(&y);
        let u = field.get(node);
        if u < inner_level {
            outer_margin = outer_margin.min(ratio + slack - form);
            max_form_inside = max_form_inside.max(form);
        } else {
            min_form_outside = min_form_outside.min(form);
        }
        if form <= ratio - slack {
            inner_margin = inner_margin.min(inner_level - u);
        }
    }
    let inner_ok = inner_margin > 0.0;
    let outer_ok = outer_margin >= 0.0;
    let min_passing_slack = (ratio - min_form_outside).max(max_form_inside - ratio);
    Ok(SandwichReport {
        level,
        inner_level,
        slack,
        inner_margin,
        outer_margin,
        inner_ok,
        outer_ok,
        min_passing_slack,
        passed: inner_ok && outer_ok,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalizationRow {
    pub level: f64,
    pub section_nodes: usize,
    pub boundary_points: usize,
    /// Row-major entries of `T`.
    pub t: Vec<Vec<f64>>,
    pub det_t: f64,
    /// `||T_k - T_{k-1}||_F`, absent on the first level.
    pub difference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalizationTable {
    pub rows: Vec<NormalizationRow>,
    pub violations: usize,
    /// Differences shrink by 0.9 per level with at most 2 exceptions.
    pub decreasing: bool,
}

impl NormalizationTable {
    pub fn differences(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.difference).collect()
    }
}

/// Counts steps where `d_k > 0.9 d_{k-1}`; differences below `1e-12` count
/// as zero and never violate.
pub fn count_decrease_violations(diffs: &[f64]) -> usize {
    diffs
        .windows(2)
        .filter(|w| w[1] >= 1e-12 && w[1] > 0.9 * w[0])
        .count()
}

/// Section, ellipsoid fit and upper-triangular normalization at each level.
pub fn normalization_iteration(field: &ScalarField, levels: &[f64]) -> Result<NormalizationTable> {
    if levels.is_empty() || levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Argument("levels must be strictly increasing".into()));
    }
    let mut rows: Vec<NormalizationRow> = Vec::new();
    let mut previous: Option<DMatrix<f64>> = None;
    for (k, &level) in levels.iter().enumerate() {
        let wrap = |e: Error| Error::Level(format!("level index {k} (M = {level}): {e}"));
        let section = extract_section(field, level).map_err(wrap)?;
        let fit = ellipsoid_fit(&section.boundary, true).map_err(wrap)?;
        let t = lu_normalize(&hessian_from_fit(&fit, level)).map_err(wrap)?;
        let difference = previous.as_ref().map(|p| (&t - p).norm());
        let dim = t.nrows();
        rows.push(NormalizationRow {
            level,
            section_nodes: section.nodes.len(),
            boundary_points: section.boundary.len(),
            t: (0..dim).map(|i| (0..dim).map(|j| t[(i, j)]).collect()).collect(),
            det_t: t.determinant(),
            difference,
        });
        previous = Some(t);
    }
    let diffs: Vec<f64> = rows.iter().filter_map(|r| r.difference).collect();
    let violations = count_decrease_violations(&diffs);
    Ok(NormalizationTable {
        rows,
        violations,
        decreasing: violations <= 2,
    })
}

pub type Evaluator = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// `x -> M^2 source(Q x / M)` for upper-triangular `Q` with unit determinant.
pub fn apply_affine_rescale(source: Evaluator, q: &DMatrix<f64>, m: f64) -> Result<Evaluator> {
    let n = q.nrows();
    if q.ncols() != n {
        return Err(Error::Validation("rescaling matrix must be square".into()));
    }
    for i in 0..n {
        for j in 0..i {
            if q[(i, j)] != 0.0 {
                return Err(Error::Validation(format!("rescaling matrix has Q[{i}][{j}] != 0")));
            }
        }
    }
    let det = q.determinant();
    if (det - 1.0).abs() > 1e-10 {
        return Err(Error::Validation(format!("rescaling matrix has det {det}, expected 1")));
    }
    if !(m > 0.0) {
        return Err(Error::Validation(format!("rescaling factor must be positive, got {m}")));
    }
    let q = q.clone();
    Ok(Arc::new(move |x: &[f64]| {
        let y = &q * DVector::from_column_slice(x) / m;
        m * m * source(y.as_slice())
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct XiRow {
    pub level: f64,
    pub section_nodes: usize,
    /// `sup |û - ξ|` outside the half-ball of radius `M^{-1/2}`.
    pub sup_difference: f64,
    /// `|Dξ(0)|`.
    pub gradient_at_origin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct XiReport {
    pub rows: Vec<XiRow>,
    /// Slope of `ln sup|û - ξ|` against `ln M` (absent if any value vanishes).
    pub difference_slope: Option<f64>,
    pub gradient_slope: Option<f64>,
}

/// Grid and resolution for [`xi_comparison_experiment`].
#[derive(Debug, Clone)]
pub struct XiSetup {
    pub h: f64,
    /// Extra room beyond the largest section radius `sqrt(2 M_max)`.
    pub margin: f64,
    pub solver: SolverConfig,
}

impl Default for XiSetup {
    fn default() -> Self {
        Self {
            h: 0.125,
            margin: 8.0,
            solver: SolverConfig::default(),
        }
    }
}

/// Solves `det D^2 u = f` once on a box containing every section, then for
/// each level `M` solves the comparison problem `det D^2 Ξ = 1` in `{u < M}`
/// with `Ξ = u` outside it. With `û(y) = u(√M y)/M` and `ξ(y) = Ξ(√M y)/M`,
/// reports `sup |û - ξ|` over `|y| >= M^{-1/2}` and `|Dξ(0)|`.
pub fn xi_comparison_experiment(f: &SourceTerm, levels: &[f64], setup: &XiSetup) -> Result<XiReport> {
    if levels.is_empty() || levels.iter().any(|&m| m < 4.0) || levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Argument("levels must be increasing and at least 4".into()));
    }
    let m_max = *levels.last().unwrap();
    let extent = ((2.0 * m_max).sqrt() + setup.margin) / setup.h;
    let l = extent.ceil() * setup.h;
    let grid = Arc::new(HalfGrid::new(2, l, l, setup.h)?);
    let half = |x: &[f64]| 0.5 * x.iter().map(|v| v * v).sum::<f64>();
    let u = crate::ma::solve_ma_dirichlet(grid.clone(), f, &half, &setup.solver, None)?;
    let ones = vec![1.0; grid.len()];
    let h = setup.h;
    let origin = grid.node_at(&[0.0, 0.0]).expect("origin is a node");
    let up1 = grid.neighbor(origin, 1, 1).unwrap();
    let up2 = grid.neighbor(origin, 1, 2).unwrap();
    let mut rows = Vec::new();
    for &level in levels {
        let unknown: Vec<bool> = (0..grid.len())
            .map(|i| grid.class(i) == NodeClass::Interior && u.get(i) < level)
            .collect();
        if unknown.iter().zip(0..).any(|(&k, i)| k && grid.class(i) == NodeClass::Outer) {
            return Err(Error::Level(format!("section at level {level} reaches the outer boundary")));
        }
        let xi = solve_ma_masked(&u, &ones, &unknown, &setup.solver, true)?.field;
        let mut sup = 0.0f64;
        for i in 0..grid.len() {
            if u.get(i) < level && grid.radius(i) >= 1.0 {
                sup = sup.max((u.get(i) - xi.get(i)).abs());
            }
        }
        // tangential derivative at the origin is the bottom data's, zero here
        let dn = (-3.0 * xi.get(origin) + 4.0 * xi.get(up1) - xi.get(up2)) / (2.0 * h);
        let mut dt = 0.0;
        if let (Some(e), Some(w)) = (grid.neighbor(origin, 0, 1), grid.neighbor(origin, 0, -1)) {
            dt = (xi.get(e) - xi.get(w)) / (2.0 * h);
        }
        let grad = (dn * dn + dt * dt).sqrt();
        rows.push(XiRow {
            level,
            section_nodes: unknown.iter().filter(|&&k| k).count(),
            sup_difference: sup / level,
            gradient_at_origin: grad / level.sqrt(),
        });
    }
    let ms: Vec<f64> = rows.iter().map(|r| r.level).collect();
    let slope = |vals: Vec<f64>| {
        (vals.len() >= 2 && vals.iter().all(|&v| v > UNDERFLOW_FLOOR)).then(|| loglog_slope(&ms, &vals))
    };
    Ok(XiReport {
        difference_slope: slope(rows.iter().map(|r| r.sup_difference).collect()),
        gradient_slope: slope(rows.iter().map(|r| r.gradient_at_origin).collect()),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{poisson_rate_or_zero, nonquadratic_solution};

    fn grid(l: f64, ln: f64, h: f64) -> Arc<HalfGrid> {
        Arc::new(HalfGrid::new(2, l, ln, h).unwrap())
    }

    fn sheared() -> QuadraticData {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 2.0]);
        QuadraticData::new(a, DVector::from_vec(vec![0.5, -0.25]), 0.75).unwrap()
    }

    #[test]
    fn exact_quadratic_fit() {
        let g = grid(16.0, 16.0, 0.5);
        let q = sheared();
        let field = ScalarField::from_fn(g.clone(), |x| q.eval(x)).unwrap();
        let nodes = g.annulus_nodes(4.0, 8.0).unwrap();
        for opts in [FitOptions::free(), FitOptions::constrained()] {
            let fit = fit_quadratic_asymptote(&field, &nodes, &opts).unwrap();
            assert!((fit.q.a() - q.a()).amax() < 1e-10);
            assert!((fit.q.b() - q.b()).amax() < 1e-10);
            assert!((fit.q.c() - q.c()).abs() < 1e-9);
        }
    }

    #[test]
    fn fit_recovers_quadratic_under_kernel_perturbation() {
        let g = grid(16.0, 16.0, 0.25);
        let q = sheared();
        let field = ScalarField::from_fn(g.clone(), |x| q.eval(x) + poisson_rate_or_zero(x)).unwrap();
        let nodes = g.annulus_nodes(8.0, 16.0).unwrap();
        // without the kernel regressor the x_n/|x|^2 tail leaks ~1e-2 into b_n
        for opts in [FitOptions::free(), FitOptions::constrained()] {
            let fit = fit_quadratic_asymptote(&field, &nodes, &opts).unwrap();
            assert!((fit.q.a() - q.a()).amax() < 2e-3);
            assert!((fit.q.b() - q.b()).amax() < 2e-2);
        }
        let opts = FitOptions {
            constraint: BottomConstraint::FromField,
            kernel_term: true,
        };
        let fit = fit_quadratic_asymptote(&field, &nodes, &opts).unwrap();
        assert!((fit.kernel_coefficient.unwrap() - 1.0).abs() < 1e-8);
        assert!((fit.q.a() - q.a()).amax() < 1e-8 && (fit.q.b() - q.b()).amax() < 1e-8);
    }

    #[test]
    fn fit_then_refit_is_idempotent() {
        let g = grid(16.0, 16.0, 0.5);
        let field = ScalarField::from_fn(g.clone(), |x| sheared().eval(x) + (0.3 * x[0]).sin() / (1.0 + x[1])).unwrap();
        let nodes = g.annulus_nodes(4.0, 12.0).unwrap();
        let fit = fit_quadratic_asymptote(&field, &nodes, &FitOptions::free()).unwrap();
        let resid = residual_field(&field, &fit.q).unwrap();
        let again = fit_quadratic_asymptote(&resid, &nodes, &FitOptions::free()).unwrap();
        assert!(again.q.a().amax() < 1e-8 && again.q.b().amax() < 1e-8 && again.q.c().abs() < 1e-8);
    }

    #[test]
    fn degenerate_annulus() {
        let g = grid(4.0, 4.0, 1.0);
        let field = ScalarField::constant(g.clone(), 0.0).unwrap();
        let few = g.annulus_nodes(0.0, 1.5).unwrap();
        assert!(matches!(
            fit_quadratic_asymptote(&field, &few, &FitOptions::free()),
            Err(Error::DegenerateAnnulus(_))
        ));
        // a single grid line cannot separate x_1^2 from x_1
        let line: Vec<usize> = (0..g.len()).filter(|&i| g.coord(i, 0) == 1.0).collect();
        let line: Vec<usize> = line.iter().cycle().take(40).copied().collect();
        assert!(matches!(
            fit_quadratic_asymptote(&field, &line, &FitOptions::free()),
            Err(Error::DegenerateAnnulus(_))
        ));
    }

    #[test]
    fn residual_of_exact_fields() {
        let g = grid(4.0, 4.0, 0.5);
        let q = sheared();
        let f = ScalarField::from_fn(g.clone(), |x| q.eval(x)).unwrap();
        assert!(residual_field(&f, &q).unwrap().sup_norm() < 1e-12);
        let f = ScalarField::from_fn(g.clone(), |x| q.eval(x) + poisson_rate_or_zero(x)).unwrap();
        let r = residual_field(&f, &q).unwrap();
        for i in 0..g.len() {
            assert!((r.get(i) - poisson_rate_or_zero(&g.coords(i))).abs() < 1e-12);
        }
    }

    #[test]
    fn decay_of_exact_kernel() {
        let g = grid(24.0, 24.0, 0.125);
        let v = ScalarField::from_fn(g, poisson_rate_or_zero).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let ray = decay_exponent(&v, &DecayMode::Ray(vec![s, s]), (2.0, 16.0)).unwrap();
        assert!((ray.exponent().unwrap() + 1.0).abs() < 1e-3, "{ray:?}");
        let bottom = decay_exponent(&v, &DecayMode::BottomNormalized, (2.0, 16.0)).unwrap();
        assert!((bottom.exponent().unwrap() + 2.0).abs() < 1e-2, "{bottom:?}");
        let ann = decay_exponent(&v, &DecayMode::Annulus, (2.0, 16.0)).unwrap();
        assert!((ann.exponent().unwrap() + 1.0).abs() < 0.1, "{ann:?}");
    }

    #[test]
    fn planted_power_laws() {
        let g = grid(24.0, 24.0, 0.25);
        for p in [-3.0, -1.0, 2.0 - TAU] {
            let v = ScalarField::from_fn(g.clone(), |x| (x[0] * x[0] + x[1] * x[1]).sqrt().max(0.25).powf(p)).unwrap();
            let fit = decay_exponent(&v, &DecayMode::Ray(vec![0.6, 0.8]), (2.0, 16.0)).unwrap();
            assert!((fit.exponent().unwrap() - p).abs() < 1e-3, "{p}: {fit:?}");
        }
    }

    #[test]
    fn underflow_and_bad_ranges() {
        let g = grid(8.0, 8.0, 0.5);
        let zero = ScalarField::constant(g.clone(), 0.0).unwrap();
        let out = decay_exponent(&zero, &DecayMode::Ray(vec![0.0, 1.0]), (1.0, 4.0)).unwrap();
        assert!(out.is_exact_zero());
        assert!(decay_exponent(&zero, &DecayMode::Ray(vec![1.0, 0.0]), (1.0, 4.0)).is_err());
        assert!(decay_exponent(&zero, &DecayMode::Ray(vec![0.0, 1.0]), (4.0, 1.0)).is_err());
        assert!(decay_exponent(&zero, &DecayMode::Ray(vec![0.0, 1.0]), (1.0, 20.0)).is_err());
    }

    #[test]
    fn derivative_decay_of_kernel() {
        let g = grid(24.0, 24.0, 0.125);
        let q = QuadraticData::half_norm_squared(2);
        let field = ScalarField::from_fn(g, |x| q.eval(x) + poisson_rate_or_zero(x)).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let d1 = derivative_decay(&field, &q, 1, &[s, s], (2.0, 16.0)).unwrap();
        assert!((d1.exponent().unwrap() + 2.0).abs() < 0.1, "{d1:?}");
        let d2 = derivative_decay(&field, &q, 2, &[s, s], (2.0, 16.0)).unwrap();
        assert!((d2.exponent().unwrap() + 3.0).abs() < 0.2, "{d2:?}");
        assert!(matches!(
            derivative_decay(&field, &q, 3, &[s, s], (2.0, 16.0)),
            Err(Error::Unsupported(_))
        ));
        let exact = ScalarField::from_fn(field.grid_arc().clone(), |x| q.eval(x)).unwrap();
        assert!(derivative_decay(&exact, &q, 1, &[s, s], (2.0, 16.0)).unwrap().is_exact_zero());
    }

    #[test]
    fn section_of_half_norm() {
        let g = grid(4.0, 4.0, 0.125);
        let f = ScalarField::from_fn(g.clone(), |x| 0.5 * (x[0] * x[0] + x[1] * x[1])).unwrap();
        let s = extract_section(&f, 2.0).unwrap();
        assert!(s.nodes.iter().all(|&i| g.radius(i) < 2.0));
        for p in &s.boundary {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!((r - 2.0).abs() < 1e-12, "{p:?}");
        }
        assert!(section_convexity_check(&f, &s, 0.125).unwrap());
        assert!(matches!(extract_section(&f, 0.0), Err(Error::Level(_))));
        assert!(matches!(extract_section(&f, 20.0), Err(Error::Level(_))));
    }

    #[test]
    fn section_of_diagonal_quadratic() {
        let g = grid(4.0, 4.0, 0.125);
        let f = ScalarField::from_fn(g.clone(), |x| x[0] * x[0] + 0.25 * x[1] * x[1]).unwrap();
        let s = extract_section(&f, 1.0).unwrap();
        for &i in &s.nodes {
            let x = g.coords(i);
            assert!(2.0 * x[0] * x[0] + 0.5 * x[1] * x[1] < 2.0);
        }
        let h = ellipsoid_fit(&s.boundary, true).unwrap();
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.25]));
        assert!((h - expected).amax() < 1e-10);
    }

    #[test]
    fn nonquadratic_section_is_convex() {
        let g = grid(8.0, 4.0, 0.0625);
        let f = ScalarField::from_fn(g, |x| nonquadratic_solution(x).unwrap().value).unwrap();
        let s = extract_section(&f, 2.0).unwrap();
        assert!(section_convexity_check(&f, &s, 0.0625).unwrap());
    }

    #[test]
    fn ellipse_fits() {
        let circle: Vec<Vec<f64>> = (0..40)
            .map(|k| {
                let t = std::f64::consts::PI * k as f64 / 39.0;
                vec![t.cos(), t.sin()]
            })
            .collect();
        let h = ellipsoid_fit(&circle, true).unwrap();
        assert!((h - DMatrix::identity(2, 2)).amax() < 1e-8);
        let ellipse: Vec<Vec<f64>> = circle.iter().map(|p| vec![p[0] / 2.0, p[1]]).collect();
        let h = ellipsoid_fit(&ellipse, false).unwrap();
        assert!((h - DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]))).amax() < 1e-8);
        let collinear = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]];
        assert!(matches!(ellipsoid_fit(&collinear, true), Err(Error::DegenerateSection(_))));
    }

    #[test]
    fn lu_normalize_examples() {
        let t = lu_normalize(&DMatrix::identity(2, 2)).unwrap();
        assert!((t - DMatrix::identity(2, 2)).amax() < 1e-15);
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 2.0]);
        let t = lu_normalize(&h).unwrap();
        assert!((&t - DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0])).amax() < 1e-15);
        assert!((t.determinant() - 1.0).abs() < 1e-15);
        let t = lu_normalize(&DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5]))).unwrap();
        assert!((t[(0, 0)] - 2f64.sqrt()).abs() < 1e-15 && (t[(1, 1)] - 0.5f64.sqrt()).abs() < 1e-15);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(lu_normalize(&bad), Err(Error::Factorization(_))));
    }

    #[test]
    fn sandwich_on_exact_quadratic() {
        let g = grid(8.0, 8.0, 0.125);
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 2.0]);
        let q = QuadraticData::from_hessian(a.clone()).unwrap();
        let f = ScalarField::from_fn(g, |x| q.eval(x)).unwrap();
        let rep = section_sandwich_check(&f, 16.0, 8.0, &a, 1e-9).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert!(rep.min_passing_slack <= 1e-9);
        let rep = section_sandwich_check(&f, 16.0, 8.0, &a, -0.1).unwrap();
        assert!(!rep.inner_ok);
    }

    #[test]
    fn normalization_of_quadratic_is_constant() {
        let g = grid(32.0, 32.0, 0.25);
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 2.0]);
        let q = QuadraticData::from_hessian(a.clone()).unwrap();
        let f = ScalarField::from_fn(g, |x| q.eval(x)).unwrap();
        let table = normalization_iteration(&f, &[4.0, 8.0, 16.0, 32.0, 64.0]).unwrap();
        let t = lu_normalize(&a).unwrap();
        for row in &table.rows {
            let tk = DMatrix::from_fn(2, 2, |i, j| row.t[i][j]);
            assert!((tk - &t).amax() < 1e-9);
        }
        assert!(table.differences().iter().all(|&d| d < 1e-9));
        assert!(table.decreasing);
    }

    #[test]
    fn affine_rescale_examples() {
        let half: Evaluator = Arc::new(|x: &[f64]| 0.5 * x.iter().map(|v| v * v).sum::<f64>());
        let id = apply_affine_rescale(half.clone(), &DMatrix::identity(2, 2), 1.0).unwrap();
        assert_eq!(id(&[0.3, 0.7]), half(&[0.3, 0.7]));
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 0.5]);
        let m = apply_affine_rescale(half.clone(), &q, 3.0).unwrap();
        let qtq = q.transpose() * &q;
        let x = DVector::from_vec(vec![0.4, 1.3]);
        assert!((m(x.as_slice()) - 0.5 * (&qtq * &x).dot(&x)).abs() < 1e-12);
        let bad = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        assert!(matches!(apply_affine_rescale(half.clone(), &bad, 1.0), Err(Error::Validation(_))));
        let lower = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        assert!(apply_affine_rescale(half, &lower, 1.0).is_err());
    }
}
