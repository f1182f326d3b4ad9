//! Node-indexed real values bound to a [`HalfGrid`].

use std::io::Write;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::HalfGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Arc<HalfGrid>,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Arc<HalfGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Argument(format!(
                "field has {} values for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value at node {i} ({:?})",
                grid.coords(i)
            )));
        }
        Ok(Self { grid, values })
    }

    /// Samples `f` at every node.
    pub fn from_fn(grid: Arc<HalfGrid>, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let mut x = vec![0.0; grid.dim()];
        let values = (0..grid.len())
            .map(|i| {
                for (a, xa) in x.iter_mut().enumerate() {
                    *xa = grid.coord(i, a);
                }
                f(&x)
            })
            .collect();
        Self::new(grid, values)
    }

    pub fn constant(grid: Arc<HalfGrid>, value: f64) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![value; n])
    }

    pub fn grid(&self) -> &HalfGrid {
        &self.grid
    }

    pub fn grid_arc(&self) -> &Arc<HalfGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, index: usize) -> f64 {
        self.values[index]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_grid(&self, other: &ScalarField) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid
    }

    fn check_same_grid(&self, other: &ScalarField) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::Argument("fields live on different grids".into()))
        }
    }

    /// Pointwise `self - other`.
    pub fn sub(&self, other: &ScalarField) -> Result<ScalarField> {
        self.check_same_grid(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        ScalarField::new(self.grid.clone(), values)
    }

    pub fn map(&self, f: impl Fn(usize, f64) -> f64) -> Result<ScalarField> {
        let values = self.values.iter().enumerate().map(|(i, &v)| f(i, v)).collect();
        ScalarField::new(self.grid.clone(), values)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest value and the node carrying it.
    pub fn max(&self) -> (usize, f64) {
        self.values
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc })
    }

    pub fn min(&self) -> (usize, f64) {
        self.values
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc })
    }

    /// Tensor-product cubic Lagrange interpolation; windows are shifted inward
    /// near the grid faces. `None` outside the closed half-rectangle.
    pub fn interpolate(&self, x: &[f64]) -> Option<f64> {
        self.interpolate_with(x, 4)
    }

    /// Tensor-product linear interpolation.
    pub fn interpolate_multilinear(&self, x: &[f64]) -> Option<f64> {
        self.interpolate_with(x, 2)
    }

    fn interpolate_with(&self, x: &[f64], order: usize) -> Option<f64> {
        let g = &*self.grid;
        let dim = g.dim();
        if x.len() != dim {
            return None;
        }
        let mut starts = [0usize; 3];
        let mut weights = [[0.0f64; 4]; 3];
        let mut widths = [0usize; 3];
        for axis in 0..dim {
            let n = g.shape()[axis];
            let origin = g.axis_coord(axis, 0);
            let t = (x[axis] - origin) / g.spacing();
            let tol = 1e-9;
            if t < -tol || t > (n - 1) as f64 + tol {
                return None;
            }
            let t = t.clamp(0.0, (n - 1) as f64);
            let width = order.min(n);
            let base = (t.floor() as usize).min(n - 2);
            let start = if width == 4 {
                base.saturating_sub(1).min(n - 4)
            } else {
                base.min(n - width)
            };
            for k in 0..width {
                let tk = (start + k) as f64;
                let mut w = 1.0;
                for m in 0..width {
                    if m != k {
                        let tm = (start + m) as f64;
                        w *= (t - tm) / (tk - tm);
                    }
                }
                weights[axis][k] = w;
            }
            starts[axis] = start;
            widths[axis] = width;
        }
        let mut total = 0.0;
        let count: usize = widths[..dim].iter().product();
        for flat in 0..count {
            let mut rem = flat;
            let mut index = 0;
            let mut w = 1.0;
            for axis in (0..dim).rev() {
                let k = rem % widths[axis];
                rem /= widths[axis];
                index += (starts[axis] + k) * g.stride(axis);
                w *= weights[axis][k];
            }
            total += w * self.values[index];
        }
        Some(total)
    }

    /// CSV rows: lattice indices, coordinates, value.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let g = &*self.grid;
        let mut w = csv::Writer::from_writer(out);
        let idx_names = ["i", "j", "k"];
        let mut header: Vec<String> = idx_names[..g.dim()].iter().map(|s| s.to_string()).collect();
        header.extend((1..=g.dim()).map(|a| format!("x{a}")));
        header.push("value".into());
        w.write_record(&header)?;
        for node in 0..g.len() {
            let mut row: Vec<String> = (0..g.dim())
                .map(|a| g.axis_index(node, a).to_string())
                .collect();
            row.extend((0..g.dim()).map(|a| g.coord(node, a).to_string()));
            row.push(self.values[node].to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}
