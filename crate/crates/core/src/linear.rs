//! Linear nondivergence equations `a_ij D_ij u = 0` on exterior half-space
//! regions, barrier checks and the boundary-value experiments built on them.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::grid::{HalfGrid, NodeClass};
use crate::oracles::{barrier_w, BarrierSpec};
use crate::sparse::{bicgstab, CsrBuilder, CsrMatrix};

type MatrixFn = dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync;

/// Coefficient matrix field with declared ellipticity bounds and decay of
/// the perturbation from the identity.
#[derive(Clone)]
pub struct CoefficientField {
    eval: Arc<MatrixFn>,
    dim: usize,
    lambda: f64,
    big_lambda: f64,
    s: f64,
    r0: f64,
}

impl fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientField")
            .field("dim", &self.dim)
            .field("lambda", &self.lambda)
            .field("big_lambda", &self.big_lambda)
            .field("s", &self.s)
            .field("r0", &self.r0)
            .finish()
    }
}

/// Angular/radial modulation of one perturbation entry.
#[derive(Debug, Clone)]
struct Mode {
    phase: f64,
    angular: Vec<f64>,
    radial: f64,
}

impl CoefficientField {
    pub fn new(
        dim: usize,
        eval: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
        lambda: f64,
        big_lambda: f64,
        s: f64,
        r0: f64,
    ) -> Result<Self> {
        if !(2..=3).contains(&dim) {
            return Err(Error::UnsupportedDimension(dim));
        }
        if !(lambda > 0.0 && big_lambda >= lambda) {
            return Err(Error::Validation(format!(
                "ellipticity bounds need 0 < lambda <= Lambda, got ({lambda}, {big_lambda})"
            )));
        }
        Ok(Self {
            eval: Arc::new(eval),
            dim,
            lambda,
            big_lambda,
            s,
            r0,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(dim, move |_| DMatrix::identity(dim, dim), 1.0, 1.0, f64::INFINITY, 0.0)
            .expect("identity is admissible")
    }

    pub fn constant(a: DMatrix<f64>) -> Result<Self> {
        let dim = a.nrows();
        let eig = SymmetricEigen::new(a.clone()).eigenvalues;
        let (lo, hi) = (eig.min(), eig.max());
        Self::new(dim, move |_| a.clone(), lo, hi, f64::INFINITY, 0.0)
    }

    /// `a(x) = clip(I + min(1, |x|^{-s}) E(x))` where each entry of `E` is
    /// `sin(phase + k.x/|x| + w ln|x|) / dim` with random phase, angular
    /// wavevector `k` and radial frequency `w`. Eigenvalues are clipped into
    /// `[lambda, Lambda]`.
    pub fn random_perturbation<R: Rng>(
        dim: usize,
        s: f64,
        lambda: f64,
        big_lambda: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(lambda <= 1.0 && big_lambda >= 1.0) {
            return Err(Error::Validation(format!(
                "bounds [{lambda}, {big_lambda}] must contain 1"
            )));
        }
        let mut modes = Vec::new();
        for _ in 0..dim * (dim + 1) / 2 {
            modes.push(Mode {
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                angular: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                radial: rng.gen_range(-1.0..1.0),
            });
        }
        let eval = move |x: &[f64]| -> DMatrix<f64> {
            let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = if r > 1.0 { r.powf(-s) } else { 1.0 };
            let (lr, rr) = if r > 0.0 { (r.ln(), r) } else { (0.0, 1.0) };
            let mut m = DMatrix::identity(dim, dim);
            let mut k = 0;
            for i in 0..dim {
                for j in i..dim {
                    let mode = &modes[k];
                    k += 1;
                    let arg = mode.phase
                        + mode.angular.iter().zip(x).map(|(c, xi)| c * xi / rr).sum::<f64>()
                        + mode.radial * lr;
                    let e = scale * arg.sin() / dim as f64;
                    m[(i, j)] += e;
                    if i != j {
                        m[(j, i)] += e;
                    }
                }
            }
            clip_eigenvalues(&m, lambda, big_lambda)
        };
        Self::new(dim, eval, lambda, big_lambda, s, 1.0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn big_lambda(&self) -> f64 {
        self.big_lambda
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        (self.eval)(x)
    }

    /// Symmetry and `lambda I <= a <= Lambda I` at `x`.
    pub fn check_at(&self, x: &[f64]) -> std::result::Result<DMatrix<f64>, String> {
        let a = self.eval(x);
        if a.nrows() != self.dim || a.ncols() != self.dim {
            return Err(format!("matrix is {}x{}", a.nrows(), a.ncols()));
        }
        if (&a - a.transpose()).abs().max() > 1e-12 {
            return Err("matrix is not symmetric".into());
        }
        let eig = SymmetricEigen::new(a.clone()).eigenvalues;
        let tol = 1e-12 * self.big_lambda;
        if eig.min() < self.lambda - tol || eig.max() > self.big_lambda + tol {
            return Err(format!(
                "eigenvalues [{:.6}, {:.6}] outside [{}, {}]",
                eig.min(),
                eig.max(),
                self.lambda,
                self.big_lambda
            ));
        }
        Ok(a)
    }
}

fn clip_eigenvalues(m: &DMatrix<f64>, lo: f64, hi: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.min() >= lo && eig.eigenvalues.max() <= hi {
        return m.clone();
    }
    let d = eig.eigenvalues.map(|l| l.clamp(lo, hi));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose();
    (&out + out.transpose()) * 0.5
}

/// Role of a node in an exterior region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionClass {
    Unknown,
    Bottom,
    Outer,
    /// Inside the excluded half-ball.
    Inner,
}

/// Grid nodes with `r_in < |x| < r_out` solved for; everything else carries
/// Dirichlet data.
#[derive(Debug, Clone)]
pub struct ExteriorRegion {
    grid: Arc<HalfGrid>,
    inner_radius: f64,
    outer_radius: f64,
    classes: Vec<RegionClass>,
}

impl ExteriorRegion {
    pub fn new(grid: Arc<HalfGrid>, inner_radius: f64) -> Result<Self> {
        Self::annulus(grid, inner_radius, f64::INFINITY)
    }

    pub fn annulus(grid: Arc<HalfGrid>, inner_radius: f64, outer_radius: f64) -> Result<Self> {
        if !(inner_radius >= 0.0 && outer_radius > inner_radius) {
            return Err(Error::Argument(format!(
                "region needs 0 <= r_in < r_out, got ({inner_radius}, {outer_radius})"
            )));
        }
        let classes: Vec<RegionClass> = (0..grid.len())
            .map(|i| {
                let r = grid.radius(i);
                if r <= inner_radius {
                    RegionClass::Inner
                } else if r >= outer_radius || grid.class(i) == NodeClass::Outer {
                    RegionClass::Outer
                } else if grid.class(i) == NodeClass::Bottom {
                    RegionClass::Bottom
                } else {
                    RegionClass::Unknown
                }
            })
            .collect();
        if !classes.contains(&RegionClass::Unknown) {
            return Err(Error::Argument("region contains no unknown nodes".into()));
        }
        Ok(Self {
            grid,
            inner_radius,
            outer_radius,
            classes,
        })
    }

    pub fn grid(&self) -> &Arc<HalfGrid> {
        &self.grid
    }

    pub fn inner_radius(&self) -> f64 {
        self.inner_radius
    }

    pub fn outer_radius(&self) -> f64 {
        self.outer_radius
    }

    pub fn class(&self, node: usize) -> RegionClass {
        self.classes[node]
    }

    /// Non-unknown nodes that appear in the stencil of some unknown node.
    pub fn frontier(&self) -> Vec<usize> {
        let g = &*self.grid;
        let mut mark = vec![false; g.len()];
        for node in 0..g.len() {
            if self.classes[node] != RegionClass::Unknown {
                continue;
            }
            for nb in stencil_nodes(g, node) {
                if self.classes[nb] != RegionClass::Unknown {
                    mark[nb] = true;
                }
            }
        }
        (0..g.len()).filter(|&i| mark[i]).collect()
    }
}

/// All nodes of the full 3^dim block around an interior node.
fn stencil_nodes(g: &HalfGrid, node: usize) -> Vec<usize> {
    let dim = g.dim();
    let mut out = Vec::with_capacity(3usize.pow(dim as u32));
    for flat in 0..3usize.pow(dim as u32) {
        let mut rem = flat;
        let mut offset = 0isize;
        for axis in 0..dim {
            let step = (rem % 3) as isize - 1;
            rem /= 3;
            offset += step * g.stride(axis) as isize;
        }
        out.push((node as isize + offset) as usize);
    }
    out
}

/// Matrix over all grid nodes: stencil rows at unknown nodes, identity rows
/// elsewhere.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub matrix: CsrMatrix,
}

/// Row weights of `sum_ij a_ij D_ij` at `node` as `(neighbor, weight)` pairs.
///
/// Mixed derivatives use the seven-point cross stencil oriented by the sign
/// of `a_ij`, so the row is monotone whenever `a` is diagonally dominant and
/// still exact on quadratics.
pub fn stencil_row(g: &HalfGrid, node: usize, a: &DMatrix<f64>) -> Vec<(usize, f64)> {
    let dim = g.dim();
    let h2 = g.spacing() * g.spacing();
    let mut row = Vec::with_capacity(3usize.pow(dim as u32));
    let mut center = 0.0;
    for i in 0..dim {
        let si = g.stride(i);
        let mut axial = a[(i, i)];
        for j in 0..dim {
            if j != i {
                axial -= a[(i, j)].abs();
            }
        }
        row.push((node + si, axial / h2));
        row.push((node - si, axial / h2));
        center -= 2.0 * axial / h2;
        for j in i + 1..dim {
            let sj = g.stride(j);
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            let w = aij.abs() / h2;
            if aij > 0.0 {
                row.push((node + si + sj, w));
                row.push((node - si - sj, w));
            } else {
                row.push((node + si - sj, w));
                row.push((node - si + sj, w));
            }
            center -= 2.0 * w;
        }
    }
    row.push((node, center));
    row
}

pub fn assemble_nondivergence(region: &ExteriorRegion, coeffs: &CoefficientField) -> Result<LinearSystem> {
    let g = &*region.grid;
    if coeffs.dim() != g.dim() {
        return Err(Error::Argument("coefficient and grid dimensions differ".into()));
    }
    let mut b = CsrBuilder::new(g.len());
    for node in 0..g.len() {
        if region.classes[node] == RegionClass::Unknown {
            let x = g.coords(node);
            let a = coeffs
                .check_at(&x)
                .map_err(|detail| Error::Coefficient { node, detail })?;
            for (col, w) in stencil_row(g, node, &a) {
                b.add(col, w);
            }
        } else {
            b.add(node, 1.0);
        }
        b.finish_row();
    }
    Ok(LinearSystem { matrix: b.build()? })
}

/// Dirichlet data given per boundary role.
pub trait BoundaryData {
    fn value(&self, x: &[f64], class: RegionClass) -> f64;
}

impl<F: Fn(&[f64], RegionClass) -> f64> BoundaryData for F {
    fn value(&self, x: &[f64], class: RegionClass) -> f64 {
        self(x, class)
    }
}

/// The same function on every boundary role.
pub struct Uniform<F>(pub F);

impl<F: Fn(&[f64]) -> f64> BoundaryData for Uniform<F> {
    fn value(&self, x: &[f64], _class: RegionClass) -> f64 {
        (self.0)(x)
    }
}

pub fn solve_linear_dirichlet(
    region: &ExteriorRegion,
    coeffs: &CoefficientField,
    data: &dyn BoundaryData,
) -> Result<ScalarField> {
    let g = region.grid.clone();
    let system = assemble_nondivergence(region, coeffs)?;
    let mut rhs = vec![0.0; g.len()];
    for (node, r) in rhs.iter_mut().enumerate() {
        let class = region.classes[node];
        if class != RegionClass::Unknown {
            *r = data.value(&g.coords(node), class);
        }
    }
    let mut x = rhs.clone();
    bicgstab(&system.matrix, &rhs, &mut x, 1e-12, 50_000)?;
    // restore exact boundary values
    for node in 0..g.len() {
        if region.classes[node] != RegionClass::Unknown {
            x[node] = rhs[node];
        }
    }
    ScalarField::new(g, x)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BarrierReport {
    pub samples: usize,
    /// Largest `a_ij D_ij w` over the sample.
    pub max_value: f64,
    pub worst_point: Vec<f64>,
    pub passed: bool,
}

/// Evaluates `a_ij(x) D_ij w(x)` with the analytic barrier Hessian at each
/// sample point; passes when every value is `<= 1e-12`.
pub fn barrier_supersolution_check(
    coeffs: &CoefficientField,
    spec: &BarrierSpec,
    sample: &[Vec<f64>],
) -> Result<BarrierReport> {
    let dim = coeffs.dim();
    spec.validate(dim)?;
    let mut max_value = f64::NEG_INFINITY;
    let mut worst_point = Vec::new();
    for x in sample {
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if x.len() != dim || r < spec.r1 * (1.0 - 1e-12) || !(x[dim - 1] > 0.0) {
            return Err(Error::Argument(format!(
                "sample point {x:?} violates |x| >= R1 = {} or x_n > 0",
                spec.r1
            )));
        }
        let v = barrier_operator(coeffs, spec, x)?;
        if v > max_value {
            max_value = v;
            worst_point = x.clone();
        }
    }
    Ok(BarrierReport {
        samples: sample.len(),
        max_value,
        worst_point,
        passed: max_value <= 1e-12,
    })
}

/// `a_ij(x) D_ij w(x)`.
pub fn barrier_operator(coeffs: &CoefficientField, spec: &BarrierSpec, x: &[f64]) -> Result<f64> {
    let jet = barrier_w(x, spec)?;
    let a = coeffs.eval(x);
    Ok(a.component_mul(&jet.hessian).sum())
}

/// Points of a polar sweep of the upper half plane (2D) or half sphere (3D)
/// at radius `r`, including near-tangential directions.
pub fn half_sphere_directions(dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut polar: Vec<f64> = (0..count)
        .map(|j| std::f64::consts::PI * (j as f64 + 0.5) / count as f64)
        .collect();
    for t in [1e-6, 1e-4, 1e-2] {
        polar.push(t);
        polar.push(std::f64::consts::PI - t);
    }
    if dim == 2 {
        polar.iter().map(|t| vec![t.cos(), t.sin()]).collect()
    } else {
        let azimuths = (count / 2).max(4);
        let mut out = Vec::new();
        for &t in &polar {
            // t measured from the bottom plane
            for k in 0..azimuths {
                let phi = std::f64::consts::TAU * k as f64 / azimuths as f64;
                out.push(vec![t.cos() * phi.cos(), t.cos() * phi.sin(), t.sin()]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadialSweep {
    pub radii: Vec<f64>,
    /// Max of `a_ij D_ij w` over the directions at each radius.
    pub max_values: Vec<f64>,
    /// Smallest sweep radius beyond which every value is nonpositive.
    pub empirical_r1: Option<f64>,
}

/// Geometric radial sweep `r_start * ratio^k <= r_end`.
pub fn barrier_radial_sweep(
    coeffs: &CoefficientField,
    spec: &BarrierSpec,
    r_start: f64,
    r_end: f64,
    ratio: f64,
    directions: usize,
) -> Result<RadialSweep> {
    if !(r_start > 0.0 && r_end > r_start && ratio > 1.0) {
        return Err(Error::Argument("sweep needs 0 < r_start < r_end and ratio > 1".into()));
    }
    let dirs = half_sphere_directions(coeffs.dim(), directions);
    let mut radii = Vec::new();
    let mut max_values = Vec::new();
    let mut r = r_start;
    while r <= r_end * (1.0 + 1e-12) {
        let mut worst = f64::NEG_INFINITY;
        for d in &dirs {
            let x: Vec<f64> = d.iter().map(|v| v * r).collect();
            worst = worst.max(barrier_operator(coeffs, spec, &x)?);
        }
        radii.push(r);
        max_values.push(worst);
        r *= ratio;
    }
    let empirical_r1 = match max_values.iter().rposition(|&v| v > 0.0) {
        None => Some(radii[0]),
        Some(k) if k + 1 < radii.len() => Some(radii[k + 1]),
        Some(_) => None,
    };
    Ok(RadialSweep {
        radii,
        max_values,
        empirical_r1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsilonReport {
    pub r0: f64,
    pub h: f64,
    /// `max u` over the middle arc `|x| = 2 r0`.
    pub max_on_arc: f64,
    pub epsilon0: f64,
    pub positive: bool,
}

/// Solves on the half annulus `r0 < |x| < 4 r0` with data 1 on both arcs and
/// `bottom_value` on the flat part, then reads `1 - max u` on `|x| = 2 r0`.
/// The grid is `[-4 r0, 4 r0] x [0, 4 r0]` with `h = r0 / cells_per_r0`.
pub fn strict_interior_bound_experiment(
    coeffs: &CoefficientField,
    r0: f64,
    bottom_value: f64,
    cells_per_r0: usize,
) -> Result<EpsilonReport> {
    if !(r0 > 0.0) || cells_per_r0 < 2 {
        return Err(Error::Argument("need r0 > 0 and at least 2 cells per r0".into()));
    }
    let dim = coeffs.dim();
    let h = r0 / cells_per_r0 as f64;
    let grid = Arc::new(HalfGrid::new(dim, 4.0 * r0, 4.0 * r0, h)?);
    let region = ExteriorRegion::annulus(grid.clone(), r0, 4.0 * r0)?;
    let data = move |_x: &[f64], class: RegionClass| {
        if class == RegionClass::Bottom {
            bottom_value
        } else {
            1.0
        }
    };
    let u = solve_linear_dirichlet(&region, coeffs, &data)?;
    let mut max_on_arc = f64::NEG_INFINITY;
    for d in half_sphere_directions(dim, 180) {
        let x: Vec<f64> = d.iter().map(|v| v * 2.0 * r0).collect();
        if let Some(v) = u.interpolate(&x) {
            max_on_arc = max_on_arc.max(v);
        }
    }
    let epsilon0 = 1.0 - max_on_arc;
    Ok(EpsilonReport {
        r0,
        h,
        max_on_arc,
        epsilon0,
        positive: epsilon0 > 0.0,
    })
}

/// Exterior problem with data on the bottom and the excluded half-ball; the
/// truncation face carries the limit value `beta`.
pub struct LimitProblem<'a> {
    pub beta: f64,
    pub inner_radius: f64,
    pub bottom: &'a dyn Fn(&[f64]) -> f64,
    pub inner: &'a dyn Fn(&[f64]) -> f64,
    /// Cells across the truncation half-width.
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitRow {
    pub radius: f64,
    pub sup_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitReport {
    pub rows: Vec<LimitRow>,
    /// Each deviation at most 1.1 times the previous one.
    pub monotone: bool,
}

/// For each `r` in the schedule, solves on the truncation `[-2r, 2r] x [0, 2r]`
/// and records `sup |u - beta|` over the arc `|x| = r`.
pub fn limit_at_infinity_experiment(
    coeffs: &CoefficientField,
    problem: &LimitProblem<'_>,
    schedule: &[f64],
) -> Result<LimitReport> {
    if schedule.is_empty() || schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Argument("schedule radii must be strictly increasing".into()));
    }
    if schedule[0] <= problem.inner_radius {
        return Err(Error::Argument("schedule must start beyond the inner radius".into()));
    }
    let dim = coeffs.dim();
    let beta = problem.beta;
    let mut rows = Vec::new();
    for &r in schedule {
        let l = 2.0 * r;
        let grid = Arc::new(HalfGrid::new(dim, l, l, l / problem.cells as f64)?);
        let region = ExteriorRegion::new(grid, problem.inner_radius)?;
        let data = |x: &[f64], class: RegionClass| match class {
            RegionClass::Bottom => (problem.bottom)(x),
            RegionClass::Inner => (problem.inner)(x),
            _ => beta,
        };
        let u = solve_linear_dirichlet(&region, coeffs, &data)?;
        let mut sup = 0.0f64;
        for d in half_sphere_directions(dim, 180) {
            let x: Vec<f64> = d.iter().map(|v| v * r).collect();
            if let Some(v) = u.interpolate(&x) {
                sup = sup.max((v - beta).abs());
            }
        }
        rows.push(LimitRow {
            radius: r,
            sup_deviation: sup,
        });
    }
    let monotone = rows
        .windows(2)
        .all(|w| w[1].sup_deviation <= 1.1 * w[0].sup_deviation);
    Ok(LimitReport { rows, monotone })
}
