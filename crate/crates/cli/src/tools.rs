//! The `table1` and `oracle` subcommands.

use std::io::Write;

use anyhow::{Context, Result};
use eigsplit_core::dense::gen_sym_eigen;
use eigsplit_core::lobpcg::{solve, EigenRequest};
use eigsplit_core::radial::{table1, RadialOrbital};
use eigsplit_core::sparse::SparseMatrix;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Radial interpolation table as CSV: one row per mesh kind.
pub fn write_table1<W: Write>(mut w: W, r_max: f64, uniform_points: usize, target: f64) -> Result<()> {
    let rows = table1(r_max, uniform_points, target)?;
    let labels = RadialOrbital::ALL.map(|o| o.label());
    write!(w, "method")?;
    for l in labels {
        write!(w, ",points_{l}")?;
    }
    for l in labels {
        write!(w, ",error_{l}")?;
    }
    writeln!(w)?;
    for r in rows {
        write!(w, "{}", r.method)?;
        for p in r.points {
            write!(w, ",{p}")?;
        }
        for e in r.errors {
            write!(w, ",{e:.6e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub struct OracleSettings {
    pub cases: usize,
    pub max_n: usize,
    pub k: usize,
    pub seed: u64,
    pub tol: f64,
}

/// Worst deviations over all pencils.
#[derive(Clone, Debug, Default)]
pub struct OracleSummary {
    pub eigenvalue: f64,
    pub b_orthonormality: f64,
    pub locked_eigenvalue: f64,
    pub prefix_unchanged: bool,
}

fn random_spd(n: usize, band: usize, shift: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut m = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i..(i + band + 1).min(n) {
            let v = rng.gen_range(-1.0..1.0);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    // diagonal dominance makes the matrix positive definite
    let rows = (0..n).map(|i| (0..n).map(|j| m[(i, j)].abs()).sum::<f64>()).fold(0.0, f64::max);
    m + DMatrix::identity(n, n) * (rows + shift)
}

fn sparse(m: &DMatrix<f64>) -> Result<SparseMatrix> {
    let n = m.nrows();
    let t: Vec<_> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| m[(i, j)] != 0.0)
        .map(|(i, j)| (i, j, m[(i, j)]))
        .collect();
    Ok(SparseMatrix::from_triplets(n, &t)?)
}

/// LOBPCG against the dense generalized solver on random banded pencils,
/// with and without a two-column exact prefix. Writes one CSV row per pencil.
pub fn run_oracle<W: Write>(mut w: W, s: &OracleSettings) -> Result<OracleSummary> {
    anyhow::ensure!(s.k >= 3, "k must be at least 3 to leave room for a two-column prefix");
    anyhow::ensure!(s.max_n >= 2 * s.k, "max-n must be at least 2k");
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut sum = OracleSummary { prefix_unchanged: true, ..Default::default() };
    writeln!(w, "case,n,max_eigenvalue_error,b_orthonormality,locked_eigenvalue_error,prefix_unchanged")?;
    for case in 0..s.cases {
        let n = rng.gen_range(2 * s.k..=s.max_n);
        let a = random_spd(n, rng.gen_range(1..4), 0.5, &mut rng);
        let b = random_spd(n, 1, 1.0, &mut rng);
        let (sa, sb) = (sparse(&a)?, sparse(&b)?);
        let (vals, vecs) = gen_sym_eigen(&a, &b)?;

        let x0 = DMatrix::from_fn(n, s.k, |_, _| rng.gen_range(-1.0..1.0));
        let mut req = EigenRequest::new(&sa, &sb, x0);
        req.tol = s.tol;
        req.maxit = 3000;
        req.seed = case as u64;
        let r = solve(&req).with_context(|| format!("pencil {case}"))?;
        let eig = (0..s.k).map(|j| (r.eigenvalues[j] - vals[j]).abs()).fold(0.0, f64::max);
        let orth = (r.vectors.transpose() * &b * &r.vectors - DMatrix::identity(s.k, s.k)).amax();

        let mut x0 = DMatrix::from_fn(n, s.k, |_, _| rng.gen_range(-1.0..1.0));
        x0.columns_mut(0, 2).copy_from(&vecs.columns(0, 2));
        let mut req = EigenRequest::new(&sa, &sb, x0.clone());
        req.n_prefix_locked = 2;
        req.tol = s.tol;
        req.maxit = 3000;
        req.seed = case as u64;
        let r = solve(&req).with_context(|| format!("locked pencil {case}"))?;
        let locked = (2..s.k).map(|j| (r.eigenvalues[j] - vals[j]).abs()).fold(0.0, f64::max);
        let same = (0..n).all(|i| (0..2).all(|j| r.vectors[(i, j)].to_bits() == x0[(i, j)].to_bits()));

        writeln!(w, "{case},{n},{eig:.3e},{orth:.3e},{locked:.3e},{same}")?;
        sum.eigenvalue = sum.eigenvalue.max(eig);
        sum.b_orthonormality = sum.b_orthonormality.max(orth);
        sum.locked_eigenvalue = sum.locked_eigenvalue.max(locked);
        sum.prefix_unchanged &= same;
    }
    Ok(sum)
}
