//! Compressed-row sparse matrices, finite element assembly and
//! preconditioned conjugate gradients.

use std::io::Write;
use std::sync::Arc;

use crate::error::{contract, Error, Result};
use crate::fespace::{Element, FeSpace};
use crate::par;

/// Row structure shared by every matrix assembled on one space.
#[derive(Debug)]
pub struct Pattern {
    n: usize,
    row_offsets: Vec<usize>,
    cols: Vec<u32>,
    /// CSR slot of each local entry `(i, j)` at index `4 * i + j`.
    elem_slots: Vec<[u32; 16]>,
}

impl Pattern {
    pub fn from_space(space: &FeSpace) -> Self {
        let n = space.n_dofs();
        let mut rows: Vec<Vec<u32>> = vec![Vec::new(); n];
        for e in space.elements() {
            for &a in &e.dofs {
                rows[a as usize].extend_from_slice(&e.dofs);
            }
        }
        let mut row_offsets = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        row_offsets.push(0);
        for r in rows.iter_mut() {
            r.sort_unstable();
            r.dedup();
            cols.extend_from_slice(r);
            row_offsets.push(cols.len());
        }
        let mut p = Pattern { n, row_offsets, cols, elem_slots: Vec::new() };
        p.elem_slots = par::map_range(space.elements().len(), |k| {
            let e = &space.elements()[k];
            let mut s = [0u32; 16];
            for i in 0..4 {
                for j in 0..4 {
                    s[4 * i + j] = p.slot(e.dofs[i] as usize, e.dofs[j] as usize).unwrap() as u32;
                }
            }
            s
        });
        p
    }

    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let (a, b) = (self.row_offsets[i], self.row_offsets[i + 1]);
        self.cols[a..b].binary_search(&(j as u32)).ok().map(|k| a + k)
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }
}

#[derive(Clone, Debug)]
pub struct SparseMatrix {
    n: usize,
    row_offsets: Arc<Vec<usize>>,
    cols: Arc<Vec<u32>>,
    values: Vec<f64>,
    symmetric: bool,
}

impl SparseMatrix {
    /// Assemble `sum_e scatter(kernel(e))` over the space's elements.
    pub fn assemble<K>(space: &FeSpace, pattern: &Pattern, kernel: K) -> Result<Self>
    where
        K: Fn(&Element) -> [[f64; 4]; 4] + Sync + Send,
    {
        let els = space.elements();
        if pattern.elem_slots.len() != els.len() {
            return contract("sparsity pattern belongs to a different space");
        }
        let locals: Vec<[[f64; 4]; 4]> = par::map_range(els.len(), |k| kernel(&els[k]));
        let mut values = vec![0.0; pattern.nnz()];
        for (k, m) in locals.iter().enumerate() {
            let scale = m.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
            for i in 0..4 {
                for j in i + 1..4 {
                    if (m[i][j] - m[j][i]).abs() > 1e-12 * scale {
                        return contract(format!("element kernel is not symmetric on element {k}"));
                    }
                }
            }
            let slots = &pattern.elem_slots[k];
            for i in 0..4 {
                for j in 0..4 {
                    values[slots[4 * i + j] as usize] += m[i][j];
                }
            }
        }
        Ok(SparseMatrix {
            n: pattern.n,
            row_offsets: Arc::new(pattern.row_offsets.clone()),
            cols: Arc::new(pattern.cols.clone()),
            values,
            symmetric: true,
        })
    }

    /// Build from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut t: Vec<(usize, usize, f64)> = triplets.to_vec();
        if t.iter().any(|&(i, j, _)| i >= n || j >= n) {
            return contract("triplet index out of range");
        }
        t.sort_by_key(|a| (a.0, a.1));
        let mut row_offsets = vec![0usize; n + 1];
        let mut cols = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        let mut last = None;
        for (i, j, v) in t {
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                cols.push(j as u32);
                values.push(v);
                row_offsets[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..n {
            row_offsets[i + 1] += row_offsets[i];
        }
        let mut m =
            SparseMatrix { n, row_offsets: Arc::new(row_offsets), cols: Arc::new(cols), values, symmetric: false };
        m.symmetric = m.is_symmetric(1e-14);
        Ok(m)
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            n,
            row_offsets: Arc::new((0..=n).collect()),
            cols: Arc::new((0..n as u32).collect()),
            values: vec![1.0; n],
            symmetric: true,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.row_offsets[i], self.row_offsets[i + 1]);
        (&self.cols[a..b], &self.values[a..b])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (c, v) = self.row(i);
        c.binary_search(&(j as u32)).map(|k| v[k]).unwrap_or(0.0)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|i| {
            let (c, v) = self.row(i);
            c.iter().zip(v).all(|(&j, &a)| (a - self.get(j as usize, i)).abs() <= tol * a.abs().max(1.0))
        })
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        par::for_each_indexed(y, |i, yi| {
            let (a, b) = (self.row_offsets[i], self.row_offsets[i + 1]);
            let mut s = 0.0;
            for k in a..b {
                s += self.values[k] * x[self.cols[k] as usize];
            }
            *yi = s;
        });
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec(x, &mut y);
        y
    }

    /// `x^T A y`.
    pub fn inner(&self, x: &[f64], y: &[f64]) -> f64 {
        let ay = self.mul(y);
        dot(x, &ay)
    }

    /// `a * self + b * other` for matrices with the same pattern.
    pub fn lin_comb(&self, a: f64, other: &SparseMatrix, b: f64) -> Result<SparseMatrix> {
        if !Arc::ptr_eq(&self.cols, &other.cols) && *self.cols != *other.cols {
            return contract("matrices have different sparsity patterns");
        }
        let values = self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect();
        Ok(SparseMatrix { values, symmetric: self.symmetric && other.symmetric, ..self.clone() })
    }

    /// Principal submatrix on the listed rows/columns (ascending).
    pub fn submatrix(&self, keep: &[usize]) -> SparseMatrix {
        let mut map = vec![u32::MAX; self.n];
        for (k, &i) in keep.iter().enumerate() {
            map[i] = k as u32;
        }
        let mut row_offsets = Vec::with_capacity(keep.len() + 1);
        let mut cols = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for &i in keep {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                let m = map[j as usize];
                if m != u32::MAX {
                    cols.push(m);
                    values.push(a);
                }
            }
            row_offsets.push(cols.len());
        }
        SparseMatrix {
            n: keep.len(),
            row_offsets: Arc::new(row_offsets),
            cols: Arc::new(cols),
            values,
            symmetric: self.symmetric,
        }
    }

    /// Impose `x_i = g_i` on the fixed dofs by elimination. Returns the
    /// modified matrix (identity rows and columns on fixed dofs) and load.
    pub fn apply_dirichlet(&self, b: &[f64], fixed: &[bool], g: &[f64]) -> Result<(SparseMatrix, Vec<f64>)> {
        if b.len() != self.n || fixed.len() != self.n || g.len() != self.n {
            return contract("dirichlet data has the wrong length");
        }
        let mut lift = vec![0.0; self.n];
        for i in 0..self.n {
            if fixed[i] {
                lift[i] = g[i];
            }
        }
        let al = self.mul(&lift);
        let mut rhs: Vec<f64> = (0..self.n).map(|i| if fixed[i] { g[i] } else { b[i] - al[i] }).collect();
        let mut m = self.clone();
        for i in 0..self.n {
            let (a, e) = (m.row_offsets[i], m.row_offsets[i + 1]);
            for k in a..e {
                let j = m.cols[k] as usize;
                if fixed[i] || fixed[j] {
                    m.values[k] = if i == j { 1.0 } else { 0.0 };
                }
            }
        }
        for i in 0..self.n {
            if fixed[i] && m.get(i, i) == 0.0 {
                return contract("fixed dof without a diagonal entry");
            }
        }
        rhs.shrink_to_fit();
        Ok((m, rhs))
    }

    /// Write in Matrix Market coordinate format.
    pub fn write_matrix_market<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(w, "{} {} {}", self.n, self.n, self.nnz())?;
        for i in 0..self.n {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                writeln!(w, "{} {} {:.17e}", i + 1, j + 1, a)?;
            }
        }
        Ok(())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub trait Preconditioner: Sync {
    fn apply(&self, r: &[f64], z: &mut [f64]);
}

pub struct IdentityPrec;

impl Preconditioner for IdentityPrec {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        z.copy_from_slice(r);
    }
}

pub struct Jacobi {
    inv_diag: Vec<f64>,
}

impl Jacobi {
    pub fn new(a: &SparseMatrix) -> Self {
        let inv_diag = a.diagonal().iter().map(|&d| if d != 0.0 { 1.0 / d } else { 1.0 }).collect();
        Jacobi { inv_diag }
    }
}

impl Preconditioner for Jacobi {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        for ((zi, ri), di) in z.iter_mut().zip(r).zip(&self.inv_diag) {
            *zi = ri * di;
        }
    }
}

#[derive(Clone, Debug)]
pub struct CgResult {
    pub x: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Residual norm before each iteration and at exit.
    pub residuals: Vec<f64>,
}

/// Preconditioned conjugate gradients. Stops when `|b - Ax| <= tol |b|`.
pub fn cg_solve(
    a: &SparseMatrix,
    b: &[f64],
    x0: &[f64],
    tol: f64,
    maxit: usize,
    prec: &dyn Preconditioner,
) -> Result<CgResult> {
    let n = a.n();
    if b.len() != n || x0.len() != n {
        return contract("cg: vector length does not match matrix");
    }
    let mut x = x0.to_vec();
    let mut r: Vec<f64> = {
        let ax = a.mul(&x);
        b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect()
    };
    let bnorm = norm(b);
    let target = tol * bnorm;
    let mut rnorm = norm(&r);
    let mut residuals = vec![rnorm];
    if rnorm <= target || bnorm == 0.0 && rnorm == 0.0 {
        return Ok(CgResult { x, converged: true, iterations: 0, residuals });
    }
    let mut z = vec![0.0; n];
    prec.apply(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 0..maxit {
        a.matvec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::Indefinite(format!("cg breakdown at iteration {it}: p'Ap = {pap:e}")));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rnorm = norm(&r);
        residuals.push(rnorm);
        if rnorm <= target {
            return Ok(CgResult { x, converged: true, iterations: it + 1, residuals });
        }
        prec.apply(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Ok(CgResult { x, converged: false, iterations: maxit, residuals })
}
