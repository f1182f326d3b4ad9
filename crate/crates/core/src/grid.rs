//! Uniform tensor grids on the half-rectangle `[-L, L]^{d-1} x [0, L_n]`.
//!
//! The last coordinate axis is the normal direction `x_n`; nodes on `x_n = 0`
//! form the bottom boundary, nodes on any other face form the outer boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Boundary structure of a grid node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeClass {
    Interior,
    Bottom,
    Outer,
}

/// JSON header describing a grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridDescriptor {
    pub dim: usize,
    pub h: f64,
    #[serde(rename = "L")]
    pub half_width: f64,
    #[serde(rename = "L_n")]
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HalfGrid {
    dim: usize,
    h: f64,
    half_width: f64,
    height: f64,
    /// Nodes per axis; the last axis is `x_n`.
    shape: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
}

fn integer_ratio(name: &str, extent: f64, h: f64) -> Result<usize> {
    let ratio = extent / h;
    let rounded = ratio.round();
    if !ratio.is_finite() || (ratio - rounded).abs() > 1e-9 * ratio.abs().max(1.0) {
        return Err(Error::Config(format!(
            "{name}: extent {extent} is not an integer multiple of h = {h}"
        )));
    }
    if rounded < 2.0 {
        return Err(Error::Config(format!(
            "{name}: extent {extent} spans fewer than 2 cells of size {h}"
        )));
    }
    Ok(rounded as usize)
}

impl HalfGrid {
    /// Builds the grid on `[-L, L]^{dim-1} x [0, L_n]` with spacing `h`.
    pub fn new(dim: usize, half_width: f64, height: f64, h: f64) -> Result<Self> {
        if !(2..=3).contains(&dim) {
            return Err(Error::UnsupportedDimension(dim));
        }
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::Config(format!("h: spacing must be positive, got {h}")));
        }
        let cells_side = integer_ratio("L", half_width, h)?;
        let cells_up = integer_ratio("L_n", height, h)?;
        let mut shape = vec![2 * cells_side + 1; dim - 1];
        shape.push(cells_up + 1);
        let mut strides = vec![1; dim];
        for axis in (0..dim - 1).rev() {
            strides[axis] = strides[axis + 1] * shape[axis + 1];
        }
        let len = shape.iter().product();
        Ok(Self {
            dim,
            h,
            half_width: cells_side as f64 * h,
            height: cells_up as f64 * h,
            shape,
            strides,
            len,
        })
    }

    pub fn from_descriptor(d: &GridDescriptor) -> Result<Self> {
        Self::new(d.dim, d.half_width, d.height, d.h)
    }

    pub fn descriptor(&self) -> GridDescriptor {
        GridDescriptor {
            dim: self.dim,
            h: self.h,
            half_width: self.half_width,
            height: self.height,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }

    /// Lattice position of `index` along `axis`.
    #[inline]
    pub fn axis_index(&self, index: usize, axis: usize) -> usize {
        (index / self.strides[axis]) % self.shape[axis]
    }

    pub fn multi_index(&self, index: usize) -> Vec<usize> {
        (0..self.dim).map(|a| self.axis_index(index, a)).collect()
    }

    pub fn index_of(&self, multi: &[usize]) -> Option<usize> {
        if multi.len() != self.dim || multi.iter().zip(&self.shape).any(|(m, s)| m >= s) {
            return None;
        }
        Some(multi.iter().zip(&self.strides).map(|(m, s)| m * s).sum())
    }

    /// Coordinate of lattice position `i` along `axis`.
    #[inline]
    pub fn axis_coord(&self, axis: usize, i: usize) -> f64 {
        if axis + 1 == self.dim {
            i as f64 * self.h
        } else {
            -self.half_width + i as f64 * self.h
        }
    }

    #[inline]
    pub fn coord(&self, index: usize, axis: usize) -> f64 {
        self.axis_coord(axis, self.axis_index(index, axis))
    }

    pub fn coords(&self, index: usize) -> Vec<f64> {
        (0..self.dim).map(|a| self.coord(index, a)).collect()
    }

    /// Euclidean norm of the node position.
    pub fn radius(&self, index: usize) -> f64 {
        (0..self.dim)
            .map(|a| self.coord(index, a).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// The node sitting exactly (within `1e-9 h`) at `x`, if any.
    pub fn node_at(&self, x: &[f64]) -> Option<usize> {
        if x.len() != self.dim {
            return None;
        }
        let mut multi = Vec::with_capacity(self.dim);
        for (axis, &xa) in x.iter().enumerate() {
            let origin = if axis + 1 == self.dim { 0.0 } else { -self.half_width };
            let t = (xa - origin) / self.h;
            let r = t.round();
            if (t - r).abs() > 1e-9 || r < 0.0 {
                return None;
            }
            multi.push(r as usize);
        }
        self.index_of(&multi)
    }

    /// Neighbor of `index` shifted by `step` cells along `axis`.
    #[inline]
    pub fn neighbor(&self, index: usize, axis: usize, step: isize) -> Option<usize> {
        let i = self.axis_index(index, axis) as isize + step;
        if i < 0 || i >= self.shape[axis] as isize {
            return None;
        }
        Some((index as isize + step * self.strides[axis] as isize) as usize)
    }

    /// Class of a valid node index (unchecked).
    #[inline]
    pub fn class(&self, index: usize) -> NodeClass {
        let last = self.dim - 1;
        if self.axis_index(index, last) == 0 {
            return NodeClass::Bottom;
        }
        for axis in 0..self.dim {
            let i = self.axis_index(index, axis);
            if i == 0 || i + 1 == self.shape[axis] {
                return NodeClass::Outer;
            }
        }
        NodeClass::Interior
    }

    pub fn classify_node(&self, index: usize) -> Result<NodeClass> {
        if index >= self.len {
            return Err(Error::OutOfRange {
                index,
                len: self.len,
            });
        }
        Ok(self.class(index))
    }

    pub fn nodes_of_class(&self, class: NodeClass) -> Vec<usize> {
        (0..self.len).filter(|&i| self.class(i) == class).collect()
    }

    /// All nodes with `r_in <= |x| < r_out`, regardless of class.
    pub fn annulus_nodes(&self, r_in: f64, r_out: f64) -> Result<Vec<usize>> {
        if !(r_in >= 0.0) || !(r_in < r_out) {
            return Err(Error::Argument(format!(
                "annulus needs 0 <= r_in < r_out, got [{r_in}, {r_out})"
            )));
        }
        Ok((0..self.len)
            .filter(|&i| {
                let r = self.radius(i);
                r >= r_in && r < r_out
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_on_small_lattice() {
        let g = HalfGrid::new(2, 1.0, 1.0, 0.5).unwrap();
        assert_eq!(g.shape(), &[5, 3]);
        assert_eq!(g.len(), 15);
        assert_eq!(g.nodes_of_class(NodeClass::Interior).len(), 3);
        assert_eq!(g.nodes_of_class(NodeClass::Bottom).len(), 5);
        // top row (5) plus the two side nodes at x_2 = 0.5
        assert_eq!(g.nodes_of_class(NodeClass::Outer).len(), 7);
    }

    #[test]
    fn bottom_nodes_enumerated() {
        let g = HalfGrid::new(2, 2.0, 2.0, 1.0).unwrap();
        let bottom: Vec<Vec<f64>> = g
            .nodes_of_class(NodeClass::Bottom)
            .into_iter()
            .map(|i| g.coords(i))
            .collect();
        let expected: Vec<Vec<f64>> = (-2..=2).map(|k| vec![k as f64, 0.0]).collect();
        assert_eq!(bottom, expected);
    }

    #[test]
    fn rejects_non_integer_ratio() {
        let err = HalfGrid::new(2, 1.0, 1.0, 0.3).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.starts_with("L:")));
        assert!(matches!(
            HalfGrid::new(4, 1.0, 1.0, 0.25),
            Err(Error::UnsupportedDimension(4))
        ));
        assert!(HalfGrid::new(2, 1.0, 1.0, -0.25).is_err());
    }

    #[test]
    fn classify_examples() {
        let h = 0.25;
        let g = HalfGrid::new(2, 1.0, 1.0, h).unwrap();
        let at = |x: f64, y: f64| g.node_at(&[x, y]).unwrap();
        assert_eq!(g.classify_node(at(0.0, 0.0)).unwrap(), NodeClass::Bottom);
        assert_eq!(g.classify_node(at(1.0, h)).unwrap(), NodeClass::Outer);
        assert_eq!(g.classify_node(at(0.0, h)).unwrap(), NodeClass::Interior);
        assert!(matches!(
            g.classify_node(g.len()),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn annulus_examples() {
        let g = HalfGrid::new(2, 2.0, 2.0, 1.0).unwrap();
        assert_eq!(g.annulus_nodes(0.0, f64::INFINITY).unwrap().len(), g.len());
        let origin = g.annulus_nodes(0.0, 0.5).unwrap();
        assert_eq!(origin, vec![g.node_at(&[0.0, 0.0]).unwrap()]);

        // brute force over the lattice: 1.5 <= |x| < 2.5
        let mut expected: Vec<usize> = Vec::new();
        for i in -2i32..=2 {
            for j in 0i32..=2 {
                let r2 = (i * i + j * j) as f64;
                if (2.25..6.25).contains(&r2) {
                    expected.push(g.node_at(&[i as f64, j as f64]).unwrap());
                }
            }
        }
        expected.sort_unstable();
        assert_eq!(g.annulus_nodes(1.5, 2.5).unwrap(), expected);
        assert!(expected.contains(&g.node_at(&[0.0, 2.0]).unwrap()));
        assert!(g.annulus_nodes(2.0, 1.0).is_err());
    }

    #[test]
    fn three_dimensional_layout() {
        let g = HalfGrid::new(3, 1.0, 1.0, 0.5).unwrap();
        assert_eq!(g.shape(), &[5, 5, 3]);
        assert_eq!(g.nodes_of_class(NodeClass::Bottom).len(), 25);
        assert_eq!(g.nodes_of_class(NodeClass::Interior).len(), 9);
        let idx = g.node_at(&[0.5, -1.0, 0.5]).unwrap();
        assert_eq!(g.coords(idx), vec![0.5, -1.0, 0.5]);
        assert_eq!(g.class(idx), NodeClass::Outer);
    }

    #[test]
    fn descriptor_json_header() {
        let g = HalfGrid::new(2, 2.0, 1.0, 0.25).unwrap();
        let json = serde_json::to_string(&g.descriptor()).unwrap();
        assert_eq!(json, r#"{"dim":2,"h":0.25,"L":2.0,"L_n":1.0}"#);
        let back: GridDescriptor = serde_json::from_str(&json).unwrap();
        assert_eq!(HalfGrid::from_descriptor(&back).unwrap(), g);
    }
}
