//! Block LOBPCG for the generalized problem `A x = lambda B x`.
//!
//! Columns lock strictly in index order: column `j + 1` can only freeze once
//! column `j` has. Frozen columns (and an optional prefix of externally
//! supplied vectors) are deflated from the search space and returned bit for
//! bit as they were when they froze.

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dense;
use crate::error::{contract, Error, Result};
use crate::par;
use crate::sparse::{dot, norm, SparseMatrix};

type Col = Vec<f64>;

const DROP_TOL: f64 = 1e-12;

/// Per-column preconditioner `w ~ T(lambda)^{-1} r`.
pub trait BlockPreconditioner: Sync {
    fn apply(&self, lambda: f64, r: &[f64], w: &mut [f64]);
}

pub struct NoPreconditioner;

impl BlockPreconditioner for NoPreconditioner {
    fn apply(&self, _lambda: f64, r: &[f64], w: &mut [f64]) {
        w.copy_from_slice(r);
    }
}

/// `T = L_half - lambda B` for negative Ritz values, identity otherwise. The
/// system is solved roughly by a fixed number of Jacobi-PCG steps.
pub struct KineticPreconditioner<'a> {
    l_half: &'a SparseMatrix,
    b: &'a SparseMatrix,
    iters: usize,
    dl: Vec<f64>,
    db: Vec<f64>,
}

impl<'a> KineticPreconditioner<'a> {
    pub fn new(l_half: &'a SparseMatrix, b: &'a SparseMatrix, iters: usize) -> Self {
        KineticPreconditioner { l_half, b, iters, dl: l_half.diagonal(), db: b.diagonal() }
    }

    fn t_mul(&self, lambda: f64, x: &[f64], y: &mut [f64]) {
        let lx = self.l_half.mul(x);
        let bx = self.b.mul(x);
        for i in 0..x.len() {
            y[i] = lx[i] - lambda * bx[i];
        }
    }
}

impl BlockPreconditioner for KineticPreconditioner<'_> {
    fn apply(&self, lambda: f64, r: &[f64], w: &mut [f64]) {
        if !(lambda < 0.0) {
            w.copy_from_slice(r);
            return;
        }
        let n = r.len();
        let inv: Vec<f64> = (0..n)
            .map(|i| {
                let d = self.dl[i] - lambda * self.db[i];
                if d > 0.0 {
                    1.0 / d
                } else {
                    1.0
                }
            })
            .collect();
        let mut x = vec![0.0; n];
        let mut res = r.to_vec();
        let mut z: Vec<f64> = res.iter().zip(&inv).map(|(a, b)| a * b).collect();
        let mut p = z.clone();
        let mut rz = dot(&res, &z);
        let mut tp = vec![0.0; n];
        let stop = 1e-14 * norm(r);
        for _ in 0..self.iters {
            self.t_mul(lambda, &p, &mut tp);
            let ptp = dot(&p, &tp);
            if !(ptp > 0.0) || rz == 0.0 {
                break;
            }
            let alpha = rz / ptp;
            for i in 0..n {
                x[i] += alpha * p[i];
                res[i] -= alpha * tp[i];
            }
            if norm(&res) <= stop {
                break;
            }
            for i in 0..n {
                z[i] = res[i] * inv[i];
            }
            let rz_new = dot(&res, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        w.copy_from_slice(&x);
    }
}

pub struct EigenRequest<'a> {
    pub a: &'a SparseMatrix,
    pub b: &'a SparseMatrix,
    /// Initial block, one column per wanted eigenpair.
    pub x0: DMatrix<f64>,
    /// Leading columns of `x0` taken as converged and never modified.
    pub n_prefix_locked: usize,
    pub tol: f64,
    pub maxit: usize,
    pub precond: Option<&'a dyn BlockPreconditioner>,
    pub seed: u64,
}

impl<'a> EigenRequest<'a> {
    pub fn new(a: &'a SparseMatrix, b: &'a SparseMatrix, x0: DMatrix<f64>) -> Self {
        EigenRequest { a, b, x0, n_prefix_locked: 0, tol: 1e-7, maxit: 500, precond: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct EigenResult {
    pub eigenvalues: Vec<f64>,
    pub vectors: DMatrix<f64>,
    /// Prefix columns count as converged.
    pub converged: Vec<bool>,
    pub iterations: usize,
    /// Per iteration, the scaled residual of every column (locked columns
    /// keep the value they locked with).
    pub residual_history: Vec<Vec<f64>>,
    /// Per iteration, the current Ritz value of every column.
    pub ritz_history: Vec<Vec<f64>>,
    pub restarts: usize,
    pub n_prefix: usize,
}

impl EigenResult {
    pub fn all_converged(&self) -> bool {
        self.converged.iter().all(|&c| c)
    }

    /// Residual history as CSV rows `iteration,column,residual`.
    pub fn write_history_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iteration,column,residual")?;
        for (it, row) in self.residual_history.iter().enumerate() {
            for (c, r) in row.iter().enumerate() {
                writeln!(w, "{it},{c},{r:.6e}")?;
            }
        }
        Ok(())
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// B-orthonormal set with cached `B q`.
struct Frame {
    q: Vec<Col>,
    bq: Vec<Col>,
}

impl Frame {
    fn new() -> Self {
        Frame { q: Vec::new(), bq: Vec::new() }
    }

    /// Project `v` (with `bv = B v`) out of the frame, twice.
    fn project(&self, v: &mut Col, bv: &mut Col) {
        for _ in 0..2 {
            for (q, bq) in self.q.iter().zip(&self.bq) {
                let c = dot(bq, v);
                axpy(v, -c, q);
                axpy(bv, -c, bq);
            }
        }
    }
}

/// Orthonormalize `v` against `frames` and append it to the last frame.
/// Returns false when `v` is numerically dependent.
fn accept(b: &SparseMatrix, frames: &mut [&mut Frame], mut v: Col) -> bool {
    let mut bv = b.mul(&v);
    let n0 = dot(&v, &bv).max(0.0).sqrt();
    if !(n0 > 0.0) || !n0.is_finite() {
        return false;
    }
    for f in frames.iter() {
        f.project(&mut v, &mut bv);
    }
    let n1 = dot(&v, &bv).max(0.0).sqrt();
    if !(n1 > DROP_TOL * n0) {
        return false;
    }
    if n1 < 0.5 * n0 {
        bv = b.mul(&v);
    }
    let nrm = dot(&v, &bv).max(0.0).sqrt();
    if !(nrm > 0.0) {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= nrm);
    bv.iter_mut().for_each(|x| *x /= nrm);
    let last = frames.len() - 1;
    frames[last].q.push(v);
    frames[last].bq.push(bv);
    true
}

fn random_col(n: usize, rng: &mut ChaCha8Rng) -> Col {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn block_mul(m: &SparseMatrix, cols: &[Col]) -> Vec<Col> {
    par::map_range(cols.len(), |j| m.mul(&cols[j]))
}

/// Ritz vectors `S C` for the leading `k` columns of `C`.
fn combine(s: &[Col], c: &DMatrix<f64>, rows: std::ops::Range<usize>, k: usize) -> Vec<Col> {
    let n = s[0].len();
    par::map_range(k, |j| {
        let mut x = vec![0.0; n];
        for r in rows.clone() {
            axpy(&mut x, c[(r, j)], &s[r]);
        }
        x
    })
}

pub fn solve(req: &EigenRequest) -> Result<EigenResult> {
    let n = req.a.n();
    let k = req.x0.ncols();
    let np = req.n_prefix_locked;
    if req.b.n() != n || req.x0.nrows() != n {
        return contract("lobpcg: matrix and block dimensions disagree");
    }
    if k == 0 || np >= k {
        return contract(format!("lobpcg: need 0 <= prefix ({np}) < block width ({k})"));
    }
    if k > n {
        return contract(format!("lobpcg: block width {k} exceeds dimension {n}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let noprec = NoPreconditioner;
    let prec: &dyn BlockPreconditioner = req.precond.unwrap_or(&noprec);
    let col = |j: usize| -> Col { req.x0.column(j).iter().copied().collect() };

    // Deflation frame: B-orthonormal copies of the prefix, then frozen columns.
    let mut locked = Frame::new();
    let mut prefix_vals = Vec::with_capacity(np);
    for j in 0..np {
        let v = col(j);
        let bv = req.b.mul(&v);
        let av = req.a.mul(&v);
        let vb = dot(&v, &bv);
        if !(vb > 0.0) {
            return Err(Error::Indefinite("prefix column has nonpositive B-norm".into()));
        }
        prefix_vals.push(dot(&v, &av) / vb);
        accept(req.b, &mut [&mut locked], v);
    }

    let mut restarts = 0;
    let mut active = Frame::new();
    for j in np..k {
        let mut v = col(j);
        let mut tries = 0;
        while !accept(req.b, &mut [&mut locked, &mut active], v) {
            tries += 1;
            if tries > 10 {
                return Err(Error::NotConverged("cannot build an independent starting block".into()));
            }
            restarts += 1;
            v = random_col(n, &mut rng);
        }
    }

    let mut x = active.q;
    let mut bx = active.bq;
    let mut ax = block_mul(req.a, &x);
    // Initial Rayleigh-Ritz on the starting block.
    {
        let m = x.len();
        let h = DMatrix::from_fn(m, m, |i, j| dot(&x[i], &ax[j]));
        let (_, c) = dense::sym_eigen(&h)?;
        x = combine(&x, &c, 0..m, m);
        ax = combine(&ax, &c, 0..m, m);
        bx = combine(&bx, &c, 0..m, m);
    }
    let mut p: Vec<Col> = Vec::new();
    let mut frozen: Vec<(Col, f64, f64)> = Vec::new();
    let mut residual_history = Vec::new();
    let mut ritz_history = Vec::new();
    let mut iterations = 0;
    let mut lambdas: Vec<f64>;
    loop {
        lambdas = (0..x.len()).map(|j| dot(&x[j], &ax[j])).collect();
        // Residuals with the locked directions removed: for an inexact
        // prefix the constrained minimizer keeps a multiple of `B q` in
        // `A x - lambda B x`, which is not an error.
        let r: Vec<Col> = par::map_range(x.len(), |j| {
            let mut rj = ax[j].clone();
            axpy(&mut rj, -lambdas[j], &bx[j]);
            for (q, bq) in locked.q.iter().zip(&locked.bq) {
                let c = dot(q, &rj);
                axpy(&mut rj, -c, bq);
            }
            rj
        });
        let res: Vec<f64> = r.iter().zip(&lambdas).map(|(rj, l)| norm(rj) / (l.abs() + 1.0)).collect();

        let mut hist = vec![0.0; np];
        hist.extend(frozen.iter().map(|f| f.2));
        hist.extend(&res);
        residual_history.push(hist);
        let mut rh = prefix_vals.clone();
        rh.extend(frozen.iter().map(|f| f.1));
        rh.extend(&lambdas);
        ritz_history.push(rh);

        // Lock in order.
        let mut nl = 0;
        while nl < x.len() && res[nl] <= req.tol {
            nl += 1;
        }
        if nl > 0 {
            for j in 0..nl {
                frozen.push((x[j].clone(), lambdas[j], res[j]));
                locked.q.push(x[j].clone());
                locked.bq.push(bx[j].clone());
            }
            x.drain(..nl);
            ax.drain(..nl);
            bx.drain(..nl);
            lambdas.drain(..nl);
            let p_keep = p.len().saturating_sub(nl);
            p.truncate(p_keep);
        }
        if x.is_empty() || iterations >= req.maxit {
            break;
        }
        iterations += 1;
        let r: Vec<Col> = r.into_iter().skip(nl).collect();
        let ma = x.len();

        let w: Vec<Col> = par::map_range(ma, |j| {
            let mut wj = vec![0.0; n];
            prec.apply(lambdas[j], &r[j], &mut wj);
            wj
        });

        // Basis [X, W, P], B-orthonormal and orthogonal to the locked frame.
        let mut basis = Frame { q: x.clone(), bq: bx.clone() };
        let mut gram_ok = true;
        for i in 0..ma {
            for j in 0..=i {
                let g = dot(&basis.q[i], &basis.bq[j]) - if i == j { 1.0 } else { 0.0 };
                if g.abs() > 1e-8 {
                    gram_ok = false;
                }
            }
        }
        if !gram_ok {
            // Re-orthonormalize X, replacing lost directions by random ones.
            let old = std::mem::replace(&mut basis, Frame::new());
            for v in old.q {
                let mut v = v;
                while !accept(req.b, &mut [&mut locked, &mut basis], v) {
                    restarts += 1;
                    v = random_col(n, &mut rng);
                }
            }
            p.clear();
            x = basis.q.clone();
            ax = block_mul(req.a, &x);
        }
        for v in w.into_iter().chain(p.drain(..)) {
            accept(req.b, &mut [&mut locked, &mut basis], v);
        }
        let m = basis.q.len();
        let extra = block_mul(req.a, &basis.q[ma..]);
        let mut as_cols = ax.clone();
        as_cols.extend(extra);
        let h = DMatrix::from_fn(m, m, |i, j| dot(&basis.q[i], &as_cols[j]));
        let (_, c) = dense::sym_eigen(&h)?;
        x = combine(&basis.q, &c, 0..m, ma);
        ax = combine(&as_cols, &c, 0..m, ma);
        bx = combine(&basis.bq, &c, 0..m, ma);
        p = if m > ma { combine(&basis.q, &c, ma..m, ma) } else { Vec::new() };
    }

    let mut eigenvalues = prefix_vals;
    let mut converged = vec![true; np];
    let mut out: Vec<Col> = (0..np).map(col).collect();
    for (v, l, _) in frozen {
        out.push(v);
        eigenvalues.push(l);
        converged.push(true);
    }
    let last_res = residual_history.last().cloned().unwrap_or_default();
    for (j, v) in x.into_iter().enumerate() {
        let idx = out.len();
        out.push(v);
        eigenvalues.push(lambdas[j]);
        converged.push(last_res.get(idx).is_some_and(|&r| r <= req.tol));
    }
    let vectors = DMatrix::from_fn(n, k, |i, j| out[j][i]);
    Ok(EigenResult {
        eigenvalues,
        vectors,
        converged,
        iterations,
        residual_history,
        ritz_history,
        restarts,
        n_prefix: np,
    })
}

/// Result of a Rayleigh-Ritz projection.
#[derive(Clone, Debug)]
pub struct RitzPairs {
    /// `m x r` coefficients; the Ritz vectors are `S C`.
    pub c: DMatrix<f64>,
    pub values: Vec<f64>,
    /// Numerical rank of the basis.
    pub rank: usize,
}

/// Solve `(S'AS) C = (S'BS) C Lambda` with a column-pivoted B-orthonormalization
/// of `S`; dependent columns are dropped and reported through `rank`.
pub fn rayleigh_ritz(s: &DMatrix<f64>, a: &SparseMatrix, b: &SparseMatrix) -> Result<RitzPairs> {
    let (n, m) = (s.nrows(), s.ncols());
    if a.n() != n || b.n() != n {
        return contract("rayleigh_ritz: dimensions disagree");
    }
    let mut v: Vec<Col> = (0..m).map(|j| s.column(j).iter().copied().collect()).collect();
    let mut bv: Vec<Col> = block_mul(b, &v);
    // coefficient columns: v_j = S t_j
    let mut t: Vec<Col> = (0..m).map(|j| (0..m).map(|i| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let norms0: Vec<f64> = (0..m).map(|j| dot(&v[j], &bv[j]).max(0.0).sqrt()).collect();
    let scale = norms0.iter().copied().fold(0.0, f64::max);
    let mut q: Vec<Col> = Vec::new();
    let mut bq: Vec<Col> = Vec::new();
    let mut tq: Vec<Col> = Vec::new();
    let mut remaining: Vec<usize> = (0..m).collect();
    while !remaining.is_empty() {
        let (pos, best) = remaining
            .iter()
            .enumerate()
            .map(|(p, &j)| (p, dot(&v[j], &bv[j]).max(0.0).sqrt()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        if !(best > DROP_TOL * scale) {
            break;
        }
        let j = remaining.swap_remove(pos);
        let (mut vj, mut bj, mut tj) = (v[j].clone(), bv[j].clone(), t[j].clone());
        for _ in 0..2 {
            for i in 0..q.len() {
                let c = dot(&bq[i], &vj);
                axpy(&mut vj, -c, &q[i]);
                axpy(&mut bj, -c, &bq[i]);
                axpy(&mut tj, -c, &tq[i]);
            }
        }
        bj = b.mul(&vj);
        let nrm = dot(&vj, &bj).max(0.0).sqrt();
        if !(nrm > DROP_TOL * scale) {
            continue;
        }
        vj.iter_mut().for_each(|x| *x /= nrm);
        bj.iter_mut().for_each(|x| *x /= nrm);
        tj.iter_mut().for_each(|x| *x /= nrm);
        for &r in &remaining {
            let c = dot(&bj, &v[r]);
            axpy(&mut v[r], -c, &vj);
            let (bjc, tjc) = (bj.clone(), tj.clone());
            axpy(&mut bv[r], -c, &bjc);
            axpy(&mut t[r], -c, &tjc);
        }
        q.push(vj);
        bq.push(bj);
        tq.push(tj);
    }
    let r = q.len();
    let aq = block_mul(a, &q);
    let h = DMatrix::from_fn(r, r, |i, j| dot(&q[i], &aq[j]));
    let (values, u) = dense::sym_eigen(&h)?;
    let tmat = DMatrix::from_fn(m, r, |i, j| tq[j][i]);
    Ok(RitzPairs { c: tmat * u, values, rank: r })
}
