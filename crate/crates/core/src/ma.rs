//! Discrete Monge-Ampère operator and a damped Newton Dirichlet solver.
//!
//! Second derivatives use central differences (three-point along axes,
//! four-point cross for mixed terms), so quadratics are reproduced exactly.
//! The Newton linearization uses the cofactor matrix of the convexified
//! discrete Hessian.

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::grid::{HalfGrid, NodeClass};
use crate::sparse::{bicgstab, CsrBuilder};

#[derive(Clone)]
enum SourceKind {
    Constant(f64),
    /// `1 + amplitude` on `{|x| < radius, x_n > 0}`, `1` elsewhere.
    Bump { amplitude: f64, radius: f64 },
    Custom(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

/// Right-hand side `f >= 0` with `f = 1` outside a half-ball of radius `R0`.
#[derive(Clone)]
pub struct SourceTerm {
    kind: SourceKind,
    support_radius: f64,
    lower: f64,
    upper: f64,
    /// Sub-cell samples per axis used to average discontinuous sources.
    supersample: usize,
}

impl fmt::Debug for SourceTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.kind {
            SourceKind::Constant(c) => format!("Constant({c})"),
            SourceKind::Bump { amplitude, radius } => format!("Bump({amplitude}, {radius})"),
            SourceKind::Custom(_) => "Custom".to_string(),
        };
        f.debug_struct("SourceTerm")
            .field("kind", &kind)
            .field("support_radius", &self.support_radius)
            .field("lower", &self.lower)
            .field("upper", &self.upper)
            .finish()
    }
}

impl SourceTerm {
    pub fn unit() -> Self {
        Self::constant(1.0)
    }

    /// Constant source. Values other than 1 do not satisfy the far-field
    /// normalization but are useful for negative controls.
    pub fn constant(c: f64) -> Self {
        Self {
            kind: SourceKind::Constant(c),
            support_radius: 0.0,
            lower: c,
            upper: c,
            supersample: 1,
        }
    }

    pub fn bump(amplitude: f64, radius: f64) -> Result<Self> {
        if !(amplitude >= -1.0) || !amplitude.is_finite() {
            return Err(Error::Validation(format!(
                "bump amplitude {amplitude} makes the source negative"
            )));
        }
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::Validation(format!("bump radius must be positive, got {radius}")));
        }
        Ok(Self {
            kind: SourceKind::Bump { amplitude, radius },
            support_radius: radius,
            lower: (1.0 + amplitude).min(1.0),
            upper: (1.0 + amplitude).max(1.0),
            supersample: 8,
        })
    }

    /// Arbitrary evaluator with declared support radius and bounds.
    pub fn custom(
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        support_radius: f64,
        lower: f64,
        upper: f64,
    ) -> Result<Self> {
        if !(lower >= 0.0) || !(upper >= lower) {
            return Err(Error::Validation(format!(
                "source bounds need 0 <= lower <= upper, got [{lower}, {upper}]"
            )));
        }
        Ok(Self {
            kind: SourceKind::Custom(Arc::new(f)),
            support_radius,
            lower,
            upper,
            supersample: 1,
        })
    }

    /// Sets the number of sub-cell samples per axis (1 = pointwise).
    pub fn with_supersample(mut self, n: usize) -> Self {
        self.supersample = n.max(1);
        self
    }

    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    pub fn lower_bound(&self) -> f64 {
        self.lower
    }

    /// The bound `Λ`.
    pub fn upper_bound(&self) -> f64 {
        self.upper
    }

    pub fn is_unit(&self) -> bool {
        matches!(self.kind, SourceKind::Constant(c) if c == 1.0)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match &self.kind {
            SourceKind::Constant(c) => *c,
            SourceKind::Bump { amplitude, radius } => {
                let n = x.len();
                let r2: f64 = x.iter().map(|v| v * v).sum();
                if x[n - 1] > 0.0 && r2 < radius * radius {
                    1.0 + amplitude
                } else {
                    1.0
                }
            }
            SourceKind::Custom(f) => f(x),
        }
    }

    /// Values attached to each node. Discontinuous sources are averaged over
    /// the node's cell so the sampled mass is second-order accurate.
    pub fn node_values(&self, grid: &HalfGrid) -> Vec<f64> {
        let dim = grid.dim();
        let h = grid.spacing();
        let m = self.supersample;
        let mut x = vec![0.0; dim];
        let mut y = vec![0.0; dim];
        (0..grid.len())
            .map(|node| {
                for (a, xa) in x.iter_mut().enumerate() {
                    *xa = grid.coord(node, a);
                }
                if m == 1 {
                    return self.eval(&x);
                }
                let r2: f64 = x.iter().map(|v| v * v).sum();
                let reach = self.support_radius + h * dim as f64;
                if r2.sqrt() > reach {
                    return self.eval(&x);
                }
                let count = m.pow(dim as u32);
                let mut total = 0.0;
                for flat in 0..count {
                    let mut rem = flat;
                    for a in 0..dim {
                        let k = rem % m;
                        rem /= m;
                        y[a] = x[a] + h * ((k as f64 + 0.5) / m as f64 - 0.5);
                    }
                    total += self.eval(&y);
                }
                total / count as f64
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Stop when the residual sup-norm drops to this value.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub backtrack: f64,
    pub min_step: f64,
    pub convexity_floor: f64,
    pub linear_rtol: f64,
    /// Per-iteration CSV log destination.
    #[serde(skip)]
    pub log_path: Option<PathBuf>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 60,
            backtrack: 0.5,
            min_step: 1e-6,
            convexity_floor: 1e-8,
            linear_rtol: 1e-12,
            log_path: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tolerance", self.tolerance),
            ("backtrack", self.backtrack),
            ("min_step", self.min_step),
            ("convexity_floor", self.convexity_floor),
            ("linear_rtol", self.linear_rtol),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("solver.{name}: must be positive, got {v}")));
            }
        }
        if self.tolerance >= 1.0 {
            return Err(Error::Config("solver.tolerance: must be below 1".into()));
        }
        if self.backtrack >= 1.0 {
            return Err(Error::Config("solver.backtrack: must be below 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("solver.max_iterations: must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub residual: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct MaSolution {
    pub field: ScalarField,
    /// Row 0 is the initial residual with step 0.
    pub history: Vec<IterationRecord>,
}

impl MaSolution {
    pub fn final_residual(&self) -> f64 {
        self.history.last().map_or(f64::INFINITY, |r| r.residual)
    }
}

/// Hessian entries at `node` from raw values; the node must have all
/// neighbors. Writes the upper `dim x dim` block of `out`.
#[inline]
fn hessian_raw(grid: &HalfGrid, values: &[f64], node: usize, out: &mut [[f64; 3]; 3]) {
    let dim = grid.dim();
    let h2 = grid.spacing() * grid.spacing();
    let u0 = values[node];
    for i in 0..dim {
        let si = grid.stride(i);
        out[i][i] = (values[node + si] - 2.0 * u0 + values[node - si]) / h2;
        for j in i + 1..dim {
            let sj = grid.stride(j);
            let v = (values[node + si + sj] - values[node + si - sj] - values[node - si + sj]
                + values[node - si - sj])
                / (4.0 * h2);
            out[i][j] = v;
            out[j][i] = v;
        }
    }
}

#[inline]
fn det_raw(dim: usize, m: &[[f64; 3]; 3]) -> f64 {
    if dim == 2 {
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    } else {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }
}

/// Central second-difference Hessian at an interior node.
pub fn discrete_hessian(field: &ScalarField, node: usize) -> Result<DMatrix<f64>> {
    let grid = field.grid();
    if grid.classify_node(node)? != NodeClass::Interior {
        return Err(Error::Stencil(node));
    }
    let dim = grid.dim();
    let mut m = [[0.0; 3]; 3];
    hessian_raw(grid, field.values(), node, &mut m);
    Ok(DMatrix::from_fn(dim, dim, |i, j| m[i][j]))
}

/// Spectral projection with eigenvalues clamped below at `floor`.
pub fn convexify(h: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(h.clone());
    let clamped = eig.eigenvalues.map(|l| l.max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose()
}

/// Cofactor matrix, so that `d det(H)[E] = sum_ij cof(H)_ij E_ij`.
pub fn cofactor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    match n {
        1 => DMatrix::from_element(1, 1, 1.0),
        2 => DMatrix::from_row_slice(2, 2, &[m[(1, 1)], -m[(1, 0)], -m[(0, 1)], m[(0, 0)]]),
        _ => DMatrix::from_fn(n, n, |i, j| {
            let minor = m.clone().remove_row(i).remove_column(j);
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            sign * minor.determinant()
        }),
    }
}

/// `det(D^2 u) - f` at interior nodes, zero on boundary nodes.
pub fn ma_residual(field: &ScalarField, f: &SourceTerm) -> Result<ScalarField> {
    let grid = field.grid();
    let fv = f.node_values(grid);
    let mut m = [[0.0; 3]; 3];
    let values = (0..grid.len())
        .map(|node| {
            if grid.class(node) != NodeClass::Interior {
                return 0.0;
            }
            hessian_raw(grid, field.values(), node, &mut m);
            det_raw(grid.dim(), &m) - fv[node]
        })
        .collect();
    ScalarField::new(field.grid_arc().clone(), values)
}

fn masked_residual(grid: &HalfGrid, values: &[f64], f: &[f64], unknowns: &[usize], out: &mut [f64]) -> f64 {
    let mut m = [[0.0; 3]; 3];
    let mut sup = 0.0f64;
    for (k, &node) in unknowns.iter().enumerate() {
        hessian_raw(grid, values, node, &mut m);
        let r = det_raw(grid.dim(), &m) - f[node];
        out[k] = r;
        sup = sup.max(r.abs());
    }
    sup
}

/// Solves `Δu = dim f^{1/dim}` on the unknown nodes with the current values
/// elsewhere as Dirichlet data. Used as a convex starting guess.
fn poisson_start(grid: &HalfGrid, values: &mut [f64], f: &[f64], unknowns: &[usize], slot: &[usize], rtol: f64) -> Result<()> {
    let dim = grid.dim();
    let h2 = grid.spacing() * grid.spacing();
    let n = unknowns.len();
    let mut a = CsrBuilder::new(n);
    let mut rhs = vec![0.0; n];
    for (k, &node) in unknowns.iter().enumerate() {
        rhs[k] = dim as f64 * f[node].max(0.0).powf(1.0 / dim as f64);
        a.add(k, -2.0 * dim as f64 / h2);
        for axis in 0..dim {
            let s = grid.stride(axis);
            for nb in [node + s, node - s] {
                if slot[nb] != usize::MAX {
                    a.add(slot[nb], 1.0 / h2);
                } else {
                    rhs[k] -= values[nb] / h2;
                }
            }
        }
        a.finish_row();
    }
    let a = a.build()?;
    let mut x: Vec<f64> = unknowns.iter().map(|&i| values[i]).collect();
    bicgstab(&a, &rhs, &mut x, rtol, 20_000)?;
    for (k, &node) in unknowns.iter().enumerate() {
        values[node] = x[k];
    }
    Ok(())
}

/// Newton solve on an arbitrary set of interior nodes. `initial` carries the
/// Dirichlet values on every other node and, when `warm` is set, the starting
/// guess on the unknown nodes.
pub fn solve_ma_masked(
    initial: &ScalarField,
    f_values: &[f64],
    unknown: &[bool],
    config: &SolverConfig,
    warm: bool,
) -> Result<MaSolution> {
    config.validate()?;
    let grid_arc = initial.grid_arc().clone();
    let grid = &*grid_arc;
    let dim = grid.dim();
    if f_values.len() != grid.len() || unknown.len() != grid.len() {
        return Err(Error::Argument("source or mask length does not match the grid".into()));
    }
    let unknowns: Vec<usize> = (0..grid.len()).filter(|&i| unknown[i]).collect();
    if let Some(&bad) = unknowns.iter().find(|&&i| grid.class(i) != NodeClass::Interior) {
        return Err(Error::Stencil(bad));
    }
    if let Some(&bad) = unknowns.iter().find(|&&i| !(f_values[i] >= 0.0)) {
        return Err(Error::Ellipticity(format!(
            "source is {} at {:?}",
            f_values[bad],
            grid.coords(bad)
        )));
    }
    if !unknowns.is_empty() && unknowns.iter().all(|&i| f_values[i] == 0.0) {
        return Err(Error::Ellipticity("source vanishes on the whole domain".into()));
    }
    let mut slot = vec![usize::MAX; grid.len()];
    for (k, &node) in unknowns.iter().enumerate() {
        slot[node] = k;
    }
    let mut values = initial.values().to_vec();
    if !warm && !unknowns.is_empty() {
        poisson_start(grid, &mut values, f_values, &unknowns, &slot, config.linear_rtol.max(1e-13))?;
    }

    let n = unknowns.len();
    let h2 = grid.spacing() * grid.spacing();
    let mut res = vec![0.0; n];
    let mut trial_res = vec![0.0; n];
    let mut trial = values.clone();
    let mut r_sup = masked_residual(grid, &values, f_values, &unknowns, &mut res);
    let mut history = vec![IterationRecord {
        iteration: 0,
        residual: r_sup,
        step: 0.0,
    }];
    let mut delta = vec![0.0; n];
    let mut m = [[0.0; 3]; 3];
    let mut iteration = 0;
    while r_sup > config.tolerance {
        if iteration >= config.max_iterations {
            return Err(nonconvergence(iteration, r_sup, grid_arc, values));
        }
        iteration += 1;
        let mut jac = CsrBuilder::new(n);
        for &node in &unknowns {
            hessian_raw(grid, &values, node, &mut m);
            let hm = DMatrix::from_fn(dim, dim, |i, j| m[i][j]);
            let cof = cofactor(&convexify(&hm, config.convexity_floor));
            let mut center = 0.0;
            for i in 0..dim {
                let si = grid.stride(i);
                let w = cof[(i, i)] / h2;
                center -= 2.0 * w;
                for nb in [node + si, node - si] {
                    if slot[nb] != usize::MAX {
                        jac.add(slot[nb], w);
                    }
                }
                for j in i + 1..dim {
                    let sj = grid.stride(j);
                    // both (i,j) and (j,i) terms
                    let w = 2.0 * cof[(i, j)] / (4.0 * h2);
                    for (nb, sign) in [
                        (node + si + sj, 1.0),
                        (node - si - sj, 1.0),
                        (node + si - sj, -1.0),
                        (node - si + sj, -1.0),
                    ] {
                        if slot[nb] != usize::MAX {
                            jac.add(slot[nb], sign * w);
                        }
                    }
                }
            }
            jac.add(slot[node], center);
            jac.finish_row();
        }
        let jac = jac.build()?;
        let rhs: Vec<f64> = res.iter().map(|r| -r).collect();
        delta.iter_mut().for_each(|d| *d = 0.0);
        if let Err(e) = bicgstab(&jac, &rhs, &mut delta, config.linear_rtol, 20_000) {
            match e {
                // a partially converged direction can still reduce the residual
                Error::LinearSolver { achieved, .. } if achieved < 0.5 => {}
                other => return Err(other),
            }
        }

        let mut t = 1.0;
        loop {
            trial.copy_from_slice(&values);
            for (k, &node) in unknowns.iter().enumerate() {
                trial[node] += t * delta[k];
            }
            let trial_sup = masked_residual(grid, &trial, f_values, &unknowns, &mut trial_res);
            if trial_sup < r_sup {
                std::mem::swap(&mut values, &mut trial);
                std::mem::swap(&mut res, &mut trial_res);
                r_sup = trial_sup;
                break;
            }
            t *= config.backtrack;
            if t < config.min_step {
                return Err(nonconvergence(iteration, r_sup, grid_arc, values));
            }
        }
        history.push(IterationRecord {
            iteration,
            residual: r_sup,
            step: t,
        });
    }
    if let Some(path) = &config.log_path {
        write_history(path, &history)?;
    }
    Ok(MaSolution {
        field: ScalarField::new(grid_arc, values)?,
        history,
    })
}

fn nonconvergence(iterations: usize, residual: f64, grid: Arc<HalfGrid>, values: Vec<f64>) -> Error {
    let iterate = match ScalarField::new(grid.clone(), values) {
        Ok(f) => f,
        Err(_) => ScalarField::constant(grid, 0.0).expect("zero field is finite"),
    };
    Error::NonConvergence {
        iterations,
        residual,
        iterate: Box::new(iterate),
    }
}

/// Writes `iteration,residual,step` rows.
pub fn write_history(path: &std::path::Path, history: &[IterationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for rec in history {
        w.serialize(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Dirichlet problem `det D^2 u = f` in the interior, `u = boundary` on the
/// bottom and outer faces.
pub fn solve_ma_dirichlet(
    grid: Arc<HalfGrid>,
    f: &SourceTerm,
    boundary: &dyn Fn(&[f64]) -> f64,
    config: &SolverConfig,
    init: Option<&ScalarField>,
) -> Result<ScalarField> {
    solve_ma_dirichlet_detailed(grid, f, boundary, config, init).map(|s| s.field)
}

pub fn solve_ma_dirichlet_detailed(
    grid: Arc<HalfGrid>,
    f: &SourceTerm,
    boundary: &dyn Fn(&[f64]) -> f64,
    config: &SolverConfig,
    init: Option<&ScalarField>,
) -> Result<MaSolution> {
    if let Some(init) = init {
        if *init.grid() != *grid {
            return Err(Error::Argument("initial field lives on a different grid".into()));
        }
    }
    let mut x = vec![0.0; grid.dim()];
    let mut values = vec![0.0; grid.len()];
    let mut unknown = vec![false; grid.len()];
    for node in 0..grid.len() {
        if grid.class(node) == NodeClass::Interior {
            unknown[node] = true;
            values[node] = init.map_or(0.0, |u| u.get(node));
        } else {
            for (a, xa) in x.iter_mut().enumerate() {
                *xa = grid.coord(node, a);
            }
            values[node] = boundary(&x);
        }
    }
    let start = ScalarField::new(grid.clone(), values)?;
    let fv = f.node_values(&grid);
    solve_ma_masked(&start, &fv, &unknown, config, init.is_some())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub holds: bool,
    /// `max(u - v)` clipped at zero.
    pub max_violation: f64,
    pub worst_node: Option<usize>,
    pub worst_point: Option<Vec<f64>>,
}

/// Checks `u <= v` at every node.
pub fn comparison_check(u: &ScalarField, v: &ScalarField) -> Result<ComparisonReport> {
    let diff = u.sub(v)?;
    let (node, worst) = diff.max();
    if worst > 0.0 {
        Ok(ComparisonReport {
            holds: false,
            max_violation: worst,
            worst_node: Some(node),
            worst_point: Some(u.grid().coords(node)),
        })
    } else {
        Ok(ComparisonReport {
            holds: true,
            max_violation: 0.0,
            worst_node: None,
            worst_point: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BottomGradientReport {
    pub min: f64,
    pub max: f64,
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub slack: f64,
    pub within: bool,
}

/// One-sided normal differences at the bottom against `[-(Λ-1), 1]`,
/// widened by `h`.
pub fn bottom_gradient_check(u: &ScalarField, big_lambda: f64) -> BottomGradientReport {
    let grid = u.grid();
    let h = grid.spacing();
    let last = grid.dim() - 1;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for node in grid.nodes_of_class(NodeClass::Bottom) {
        let up = grid.neighbor(node, last, 1).expect("grid has at least two rows");
        let d = (u.get(up) - u.get(node)) / h;
        lo = lo.min(d);
        hi = hi.max(d);
    }
    let slack = h;
    let lower_bound = -(big_lambda - 1.0);
    BottomGradientReport {
        min: lo,
        max: hi,
        lower_bound,
        upper_bound: 1.0,
        slack,
        within: lo >= lower_bound - slack && hi <= 1.0 + slack,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{nonquadratic_solution, u_pm, ProfileSide, QuadraticData, SourceProfile};

    fn grid(l: f64, ln: f64, h: f64) -> Arc<HalfGrid> {
        Arc::new(HalfGrid::new(2, l, ln, h).unwrap())
    }

    #[test]
    fn hessian_exact_on_quadratics_and_affine() {
        let g = grid(2.0, 2.0, 0.25);
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.7, 0.7, 0.5]);
        let q = QuadraticData::new(a.clone(), nalgebra::DVector::from_vec(vec![0.3, -1.0]), 2.0).unwrap();
        let field = ScalarField::from_fn(g.clone(), |x| q.eval(x)).unwrap();
        let affine = ScalarField::from_fn(g.clone(), |x| 3.0 * x[0] - x[1] + 1.0).unwrap();
        for node in g.nodes_of_class(NodeClass::Interior) {
            let h = discrete_hessian(&field, node).unwrap();
            assert!((h - &a).abs().max() < 1e-12);
            assert!(discrete_hessian(&affine, node).unwrap().abs().max() < 1e-12);
        }
        let bottom = g.node_at(&[0.0, 0.0]).unwrap();
        assert!(matches!(discrete_hessian(&field, bottom), Err(Error::Stencil(_))));
    }

    #[test]
    fn hessian_error_is_second_order() {
        let errs: Vec<f64> = [0.125, 0.0625]
            .iter()
            .map(|&h| {
                let g = grid(2.0, 2.0, h);
                let f = ScalarField::from_fn(g.clone(), |x| nonquadratic_solution(x).unwrap().value).unwrap();
                let node = g.node_at(&[1.0, 1.0]).unwrap();
                let exact = nonquadratic_solution(&[1.0, 1.0]).unwrap().hessian;
                (discrete_hessian(&f, node).unwrap() - exact).abs().max()
            })
            .collect();
        let ratio = errs[0] / errs[1];
        assert!((ratio - 4.0).abs() < 0.3, "ratio {ratio}");
    }

    #[test]
    fn convexify_examples() {
        let i = DMatrix::<f64>::identity(2, 2);
        assert!((convexify(&i, 1e-8) - &i).abs().max() < 1e-15);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, -1.0]));
        let c = convexify(&d, 1e-8);
        assert!((c[(0, 0)] - 1.0).abs() < 1e-15 && (c[(1, 1)] - 1e-8).abs() < 1e-15);
        assert!(c[(0, 1)].abs() < 1e-15);
        // [[0,1],[1,0]] has eigenpairs (1, (1,1)/√2), (-1, (1,-1)/√2)
        let s = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let c = convexify(&s, 0.0);
        let expected = DMatrix::from_element(2, 2, 0.5);
        assert!((c - expected).abs().max() < 1e-14);
    }

    #[test]
    fn cofactor_matches_adjugate() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.0]);
        let adj = m.clone().try_inverse().unwrap() * m.determinant();
        assert!((cofactor(&m) - adj.transpose()).abs().max() < 1e-12);
    }

    #[test]
    fn residual_examples() {
        let g = grid(2.0, 2.0, 0.25);
        let half = ScalarField::from_fn(g.clone(), |x| 0.5 * (x[0] * x[0] + x[1] * x[1])).unwrap();
        assert!(ma_residual(&half, &SourceTerm::unit()).unwrap().sup_norm() < 1e-12);
        // det A = 2
        let q = ScalarField::from_fn(g.clone(), |x| x[0] * x[0] + 0.5 * x[1] * x[1]).unwrap();
        let r = ma_residual(&q, &SourceTerm::unit()).unwrap();
        for node in 0..g.len() {
            let expect = if g.class(node) == NodeClass::Interior { 1.0 } else { 0.0 };
            assert!((r.get(node) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn nonquadratic_residual_regression() {
        let g = grid(2.0, 2.0, 1.0 / 32.0);
        let f = ScalarField::from_fn(g, |x| nonquadratic_solution(x).unwrap().value).unwrap();
        let r = ma_residual(&f, &SourceTerm::unit()).unwrap().sup_norm();
        assert!(r <= 1e-2, "{r}");
        assert!(r > 0.0);
    }

    #[test]
    fn quadratic_data_solved_exactly() {
        let g = grid(2.0, 2.0, 0.125);
        let half = |x: &[f64]| 0.5 * (x[0] * x[0] + x[1] * x[1]);
        let u = solve_ma_dirichlet(g.clone(), &SourceTerm::unit(), &half, &SolverConfig::default(), None).unwrap();
        for node in 0..g.len() {
            assert!((u.get(node) - half(&g.coords(node))).abs() < 1e-9);
        }
    }

    #[test]
    fn bump_solution_respects_sandwich() {
        let g = grid(2.0, 2.0, 0.0625);
        let f = SourceTerm::bump(5.0, 0.5).unwrap();
        let half = |x: &[f64]| 0.5 * (x[0] * x[0] + x[1] * x[1]);
        let sol = solve_ma_dirichlet_detailed(g.clone(), &f, &half, &SolverConfig::default(), None).unwrap();
        assert!(sol.final_residual() <= 1e-10);
        let big = f.upper_bound();
        for node in 0..g.len() {
            let x = g.coords(node);
            let u = sol.field.get(node);
            assert!(u >= half(&x) - (big - 1.0) * x[1] - 1e-9);
            assert!(u <= half(&x) + x[1] + 1e-9);
        }
        let rep = bottom_gradient_check(&sol.field, big);
        assert!(rep.within, "{rep:?}");
    }

    #[test]
    fn comparison_examples() {
        let g = grid(1.0, 1.0, 0.25);
        let v = ScalarField::from_fn(g.clone(), |x| x[0] + x[1]).unwrap();
        let rep = comparison_check(&v, &v).unwrap();
        assert!(rep.holds && rep.max_violation == 0.0);
        let bumped = v.map(|i, val| if i == 7 { val + 1e-3 } else { val }).unwrap();
        let rep = comparison_check(&bumped, &v).unwrap();
        assert!(!rep.holds);
        assert_eq!(rep.worst_node, Some(7));
        assert!((rep.max_violation - 1e-3).abs() < 1e-12);
        let other = ScalarField::constant(grid(2.0, 1.0, 0.25), 0.0).unwrap();
        assert!(comparison_check(&v, &other).is_err());
    }

    #[test]
    fn bottom_gradient_of_profile_solutions() {
        let g = grid(2.0, 2.0, 0.125);
        let half = ScalarField::from_fn(g.clone(), |x| 0.5 * (x[0] * x[0] + x[1] * x[1])).unwrap();
        let rep = bottom_gradient_check(&half, 2.0);
        // one-sided difference of x_n^2/2 is h/2
        assert!(rep.within && (rep.min - 0.0625).abs() < 1e-12);
        let plus = SourceProfile::constant(ProfileSide::Plus, 0.0, 2.0);
        let up = ScalarField::from_fn(g, |x| u_pm(x, &plus).unwrap()).unwrap();
        let rep = bottom_gradient_check(&up, 2.0);
        // u_+ = x_n^2/2 - x_n^2/2 near the bottom, so D_n u = 0 there
        assert!(rep.within && rep.max.abs() < 1e-12);
    }

    #[test]
    fn negative_source_rejected() {
        let g = grid(1.0, 1.0, 0.25);
        let f = SourceTerm::custom(|_| -1.0, 0.0, 0.0, 1.0).unwrap();
        let err = solve_ma_dirichlet(g, &f, &|_| 0.0, &SolverConfig::default(), None).unwrap_err();
        assert!(matches!(err, Error::Ellipticity(_)));
    }

    #[test]
    fn cell_averaged_bump_mass() {
        let g = grid(1.0, 1.0, 0.125);
        let f = SourceTerm::bump(1.0, 0.5).unwrap();
        let vals = f.node_values(&g);
        // mass of the excess over interior cells approximates the half-disk area
        let h2 = 0.125 * 0.125;
        let mass: f64 = (0..g.len())
            .filter(|&i| g.class(i) == NodeClass::Interior)
            .map(|i| (vals[i] - 1.0) * h2)
            .sum();
        // interior cells cover x_2 > h/2 only
        let (r, a): (f64, f64) = (0.5, 0.0625);
        let exact = r * r * std::f64::consts::FRAC_PI_2 - a * (r * r - a * a).sqrt() - r * r * (a / r).asin();
        assert!((mass - exact).abs() < 3e-3, "{mass} vs {exact}");
    }
}
