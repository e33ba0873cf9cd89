//! One-dimensional radial tools: linear interpolation of hydrogen radial
//! orbitals on uniform, equidistributed and per-orbital meshes, and a
//! radial LDA atom solver used as a reference for the 3-D code.

use crate::error::{contract, Error, Result};
use crate::xc;

/// Closed-form radial functions `u(r) = r R(r)` of hydrogen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RadialOrbital {
    S1,
    S2,
    P2,
}

impl RadialOrbital {
    pub const ALL: [RadialOrbital; 3] = [RadialOrbital::S1, RadialOrbital::S2, RadialOrbital::P2];

    pub fn label(self) -> &'static str {
        match self {
            RadialOrbital::S1 => "1s",
            RadialOrbital::S2 => "2s",
            RadialOrbital::P2 => "2p",
        }
    }

    pub fn eval(self, r: f64) -> f64 {
        match self {
            RadialOrbital::S1 => 2.0 * r * (-r).exp(),
            // Used unnormalized; its L2 norm is 1/sqrt(2).
            RadialOrbital::S2 => 0.5 * r * (-0.5 * r).exp() * (1.0 - 0.5 * r),
            RadialOrbital::P2 => r * r * (-0.5 * r).exp() / (2.0 * 6f64.sqrt()),
        }
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else { p1 };
            dp = n as f64 * (z * p - p0) / (z * z - 1.0);
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

const GAUSS_POINTS: usize = 8;

fn check_mesh(points: &[f64]) -> Result<()> {
    if points.len() < 2 {
        return contract("a radial mesh needs at least two points");
    }
    if points.windows(2).any(|w| !(w[1] > w[0])) {
        return contract("radial mesh points must be strictly ascending");
    }
    Ok(())
}

/// Squared L2 interpolation error of `f` on each interval.
pub fn interval_errors<F: Fn(f64) -> f64>(f: F, points: &[f64]) -> Result<Vec<f64>> {
    check_mesh(points)?;
    let (gx, gw) = gauss_legendre(GAUSS_POINTS);
    Ok(points
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let (fa, fb) = (f(a), f(b));
            let half = 0.5 * (b - a);
            gx.iter()
                .zip(&gw)
                .map(|(&t, &wt)| {
                    let x = 0.5 * (a + b) + half * t;
                    let lin = fa + (fb - fa) * (x - a) / (b - a);
                    wt * half * (f(x) - lin).powi(2)
                })
                .sum()
        })
        .collect())
}

/// L2 norm of `f - I_h f` over the mesh span.
pub fn interp_l2_error<F: Fn(f64) -> f64>(f: F, points: &[f64]) -> Result<f64> {
    Ok(interval_errors(f, points)?.iter().sum::<f64>().sqrt())
}

pub fn uniform_mesh(r_max: f64, n_points: usize) -> Vec<f64> {
    (0..n_points).map(|i| r_max * i as f64 / (n_points - 1) as f64).collect()
}

#[derive(Clone, Debug)]
pub struct Equidistributed {
    pub points: Vec<f64>,
    /// Final `max / mean` of the per-interval L2 errors.
    pub ratio: f64,
    pub converged: bool,
    pub sweeps: usize,
}

/// Move `n_points` on `[0, r_max]` so that every interval carries the same
/// summed L2 interpolation error of `orbitals`.
pub fn equidistribute(orbitals: &[RadialOrbital], n_points: usize, r_max: f64) -> Result<Equidistributed> {
    if n_points < 3 {
        return contract("equidistribution needs at least 3 points");
    }
    if orbitals.is_empty() {
        return contract("no orbitals to equidistribute");
    }
    let summed = |pts: &[f64]| -> Vec<f64> {
        let mut e = vec![0.0; pts.len() - 1];
        for o in orbitals {
            for (a, b) in e.iter_mut().zip(interval_errors(|r| o.eval(r), pts).unwrap()) {
                *a += b;
            }
        }
        e
    };
    let ratio_of = |e: &[f64]| {
        let l: Vec<f64> = e.iter().map(|x| x.sqrt()).collect();
        let mean = l.iter().sum::<f64>() / l.len() as f64;
        l.iter().copied().fold(0.0, f64::max) / mean
    };
    let mut pts = uniform_mesh(r_max, n_points);
    let mut best = (f64::INFINITY, pts.clone());
    let mut sweeps = 0;
    for sweep in 0..200 {
        sweeps = sweep + 1;
        let e = summed(&pts);
        let ratio = ratio_of(&e);
        if ratio < best.0 {
            best = (ratio, pts.clone());
        }
        if ratio <= 1.2 {
            return Ok(Equidistributed { points: pts, ratio, converged: true, sweeps });
        }
        // Interval error behaves like (m h)^5 with a local density m.
        let mut m: Vec<f64> =
            e.iter().zip(pts.windows(2)).map(|(ei, w)| (ei / (w[1] - w[0]).powi(5)).powf(0.2)).collect();
        let mmax = m.iter().copied().fold(0.0, f64::max);
        m.iter_mut().for_each(|x| *x = x.max(1e-3 * mmax));
        let mut cum = vec![0.0; m.len() + 1];
        for i in 0..m.len() {
            cum[i + 1] = cum[i] + m[i] * (pts[i + 1] - pts[i]);
        }
        let total = cum[m.len()];
        let mut new = vec![0.0; n_points];
        let mut seg = 0;
        for (k, nk) in new.iter_mut().enumerate().take(n_points - 1).skip(1) {
            let target = total * k as f64 / (n_points - 1) as f64;
            while cum[seg + 1] < target {
                seg += 1;
            }
            let t = (target - cum[seg]) / (cum[seg + 1] - cum[seg]);
            *nk = pts[seg] + t * (pts[seg + 1] - pts[seg]);
        }
        new[n_points - 1] = r_max;
        for i in 1..n_points - 1 {
            pts[i] = 0.5 * (pts[i] + new[i]);
        }
    }
    let (ratio, points) = best;
    Ok(Equidistributed { points, ratio, converged: false, sweeps })
}

/// Smallest equidistributed mesh for `orbitals` on which every orbital's
/// interpolation error is at most `target`.
pub fn min_points_for(orbitals: &[RadialOrbital], target: f64, r_max: f64) -> Result<Equidistributed> {
    for n in 3..=2000 {
        let m = equidistribute(orbitals, n, r_max)?;
        let ok = orbitals.iter().all(|o| interp_l2_error(|r| o.eval(r), &m.points).unwrap() <= target);
        if ok {
            return Ok(m);
        }
    }
    Err(Error::NotConverged(format!("no mesh up to 2000 points reaches error {target}")))
}

/// One row of the interpolation table.
#[derive(Clone, Debug)]
pub struct Table1Row {
    pub method: &'static str,
    pub points: [usize; 3],
    pub errors: [f64; 3],
}

/// Uniform mesh, one shared equidistributed mesh, and one equidistributed
/// mesh per orbital, the latter two sized to reach `target` on each orbital.
pub fn table1(r_max: f64, uniform_points: usize, target: f64) -> Result<Vec<Table1Row>> {
    let err = |o: RadialOrbital, pts: &[f64]| interp_l2_error(|r| o.eval(r), pts).unwrap();
    let uni = uniform_mesh(r_max, uniform_points);
    let mut rows = vec![Table1Row {
        method: "uni-mesh",
        points: [uniform_points; 3],
        errors: RadialOrbital::ALL.map(|o| err(o, &uni)),
    }];
    let shared = min_points_for(&RadialOrbital::ALL, target, r_max)?;
    rows.push(Table1Row {
        method: "ada-mesh",
        points: [shared.points.len(); 3],
        errors: RadialOrbital::ALL.map(|o| err(o, &shared.points)),
    });
    let per: Vec<Equidistributed> =
        RadialOrbital::ALL.iter().map(|o| min_points_for(&[*o], target, r_max)).collect::<Result<_>>()?;
    rows.push(Table1Row {
        method: "mul-mesh",
        points: [0, 1, 2].map(|k| per[k].points.len()),
        errors: [0, 1, 2].map(|k| err(RadialOrbital::ALL[k], &per[k].points)),
    });
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Radial LDA atom.

#[derive(Clone, Debug)]
pub struct RadialLevel {
    pub n: u32,
    pub l: u32,
    pub occupation: f64,
    pub energy: f64,
}

#[derive(Clone, Debug)]
pub struct RadialLdaResult {
    /// Occupied levels in filling order, followed by the lowest empty one
    /// when it is bound.
    pub levels: Vec<RadialLevel>,
    pub total_energy: f64,
    pub iterations: usize,
}

impl RadialLdaResult {
    pub fn level(&self, n: u32, l: u32) -> Option<&RadialLevel> {
        self.levels.iter().find(|v| v.n == n && v.l == l)
    }
}

const SHELLS: [(u32, u32); 5] = [(1, 0), (2, 0), (2, 1), (3, 0), (3, 1)];

/// Log grid `r = exp(x)` with the reduced function `v = u / sqrt(r)`.
struct LogGrid {
    h: f64,
    r: Vec<f64>,
}

impl LogGrid {
    fn new(z: f64, h: f64) -> Self {
        let x0 = (1e-10 / z).ln();
        let x1 = 80f64.ln();
        let n = ((x1 - x0) / h).round() as usize;
        let h = (x1 - x0) / n as f64;
        // interior points only; v vanishes at both ends
        let r = (1..n).map(|i| (x0 + i as f64 * h).exp()).collect();
        LogGrid { h, r }
    }
}

fn sturm_count(d: &[f64], e2: &[f64], sigma: f64) -> usize {
    let mut count = 0;
    let mut q = d[0] - sigma;
    if q < 0.0 {
        count += 1;
    }
    for i in 1..d.len() {
        let prev = if q == 0.0 { 1e-300 } else { q };
        q = d[i] - sigma - e2[i - 1] / prev;
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// `k`-th smallest eigenvalue (0-based) of a symmetric tridiagonal matrix.
fn tridiag_eigenvalue(d: &[f64], e: &[f64], k: usize, lo: f64, hi: f64) -> Result<f64> {
    let e2: Vec<f64> = e.iter().map(|x| x * x).collect();
    if sturm_count(d, &e2, hi) <= k {
        return Err(Error::NotConverged(format!("bound state {k} not found below {hi}")));
    }
    let (mut a, mut b) = (lo, hi);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if sturm_count(d, &e2, mid) > k {
            b = mid;
        } else {
            a = mid;
        }
        if b - a <= 1e-15 * (1.0 + mid.abs()) {
            break;
        }
    }
    Ok(0.5 * (a + b))
}

/// Eigenvector of a symmetric tridiagonal matrix by inverse iteration.
fn tridiag_vector(d: &[f64], e: &[f64], lambda: f64) -> Vec<f64> {
    let n = d.len();
    let shift = lambda + 1e-12 * (1.0 + lambda.abs());
    let mut y = vec![1.0; n];
    for _ in 0..3 {
        // Thomas algorithm on (T - shift) x = y
        let mut c = vec![0.0; n];
        let mut g = vec![0.0; n];
        let mut piv = d[0] - shift;
        if piv == 0.0 {
            piv = 1e-300;
        }
        c[0] = if n > 1 { e[0] / piv } else { 0.0 };
        g[0] = y[0] / piv;
        for i in 1..n {
            let mut p = d[i] - shift - e[i - 1] * c[i - 1];
            if p == 0.0 {
                p = 1e-300;
            }
            if i + 1 < n {
                c[i] = e[i] / p;
            }
            g[i] = (y[i] - e[i - 1] * g[i - 1]) / p;
        }
        let mut x = vec![0.0; n];
        x[n - 1] = g[n - 1];
        for i in (0..n - 1).rev() {
            x[i] = g[i] - c[i] * x[i + 1];
        }
        let nrm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        y = x.into_iter().map(|v| v / nrm).collect();
    }
    y
}

struct AtomState {
    levels: Vec<RadialLevel>,
    total_energy: f64,
    iterations: usize,
}

fn solve_on_grid(z: f64, occ: &[(u32, u32, f64)], lumo: Option<(u32, u32)>, h: f64) -> Result<AtomState> {
    let g = LogGrid::new(z, h);
    let n = g.r.len();
    let hh = g.h;
    let w: Vec<f64> = g.r.iter().map(|r| 2.0 * r * r).collect();
    // electrons per unit x at each node: 4 pi r^3 rho
    let mut dens = vec![0.0; n];
    let mut v_eff: Vec<f64> = g.r.iter().map(|r| -z / r).collect();
    let mut energy_old = f64::INFINITY;
    let mut levels = Vec::new();
    let mut wanted: Vec<(u32, u32, f64)> = occ.to_vec();
    if let Some((nl, ll)) = lumo {
        wanted.push((nl, ll, 0.0));
    }
    for it in 0..400 {
        levels.clear();
        let mut dens_out = vec![0.0; n];
        let mut band = 0.0;
        for l in 0..=wanted.iter().map(|s| s.1).max().unwrap_or(0) {
            let in_l: Vec<&(u32, u32, f64)> = wanted.iter().filter(|s| s.1 == l).collect();
            if in_l.is_empty() {
                continue;
            }
            let lh = (l as f64 + 0.5).powi(2);
            let d: Vec<f64> = (0..n).map(|i| (2.0 / (hh * hh) + lh + w[i] * v_eff[i]) / w[i]).collect();
            let e: Vec<f64> = (0..n - 1).map(|i| -1.0 / (hh * hh * (w[i] * w[i + 1]).sqrt())).collect();
            for s in in_l {
                let k = (s.0 - l - 1) as usize;
                let eps = match tridiag_eigenvalue(&d, &e, k, -2.0 * z * z - 10.0, 0.0) {
                    Ok(v) => v,
                    // an empty level may be unbound in a neutral potential
                    Err(_) if s.2 == 0.0 => continue,
                    Err(err) => return Err(err),
                };
                let y = tridiag_vector(&d, &e, eps);
                let v: Vec<f64> = y.iter().zip(&w).map(|(yi, wi)| yi / wi.sqrt()).collect();
                let norm: f64 = (0..n).map(|i| g.r[i] * g.r[i] * v[i] * v[i]).sum::<f64>() * hh;
                for i in 0..n {
                    dens_out[i] += s.2 * g.r[i] * g.r[i] * v[i] * v[i] / norm;
                }
                band += s.2 * eps;
                levels.push(RadialLevel { n: s.0, l: s.1, occupation: s.2, energy: eps });
            }
        }
        if it == 0 {
            dens = dens_out.clone();
        }
        // Energy of the output density with its own potential pieces.
        let (vh, vxc, exc) = potentials(&g, &dens);
        let e_h: f64 = 0.5 * (0..n).map(|i| dens[i] * vh[i]).sum::<f64>() * hh;
        let dc: f64 = (0..n).map(|i| dens[i] * (exc[i] - vxc[i])).sum::<f64>() * hh;
        let total = band - e_h + dc;
        let diff: f64 = (0..n).map(|i| (dens_out[i] - dens[i]).abs()).sum::<f64>() * hh;
        if it > 0 && diff < 1e-11 && (total - energy_old).abs() < 1e-12 {
            return Ok(AtomState { levels, total_energy: total, iterations: it });
        }
        energy_old = total;
        let beta = 0.4;
        for i in 0..n {
            dens[i] = (1.0 - beta) * dens[i] + beta * dens_out[i];
        }
        let (vh, vxc, _) = potentials(&g, &dens);
        for i in 0..n {
            v_eff[i] = -z / g.r[i] + vh[i] + vxc[i];
        }
    }
    Err(Error::NotConverged("radial LDA self-consistency".into()))
}

/// Hartree potential, xc potential and xc energy density on the grid.
fn potentials(g: &LogGrid, dens: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = g.r.len();
    let h = g.h;
    let mut q = vec![0.0; n];
    for i in 1..n {
        q[i] = q[i - 1] + 0.5 * h * (dens[i] + dens[i - 1]);
    }
    let mut outer = vec![0.0; n];
    for i in (0..n - 1).rev() {
        outer[i] = outer[i + 1] + 0.5 * h * (dens[i] / g.r[i] + dens[i + 1] / g.r[i + 1]);
    }
    let vh: Vec<f64> = (0..n).map(|i| q[i] / g.r[i] + outer[i]).collect();
    let mut vxc = vec![0.0; n];
    let mut exc = vec![0.0; n];
    for i in 0..n {
        let rho = dens[i] / (4.0 * std::f64::consts::PI * g.r[i].powi(3));
        let x = xc::eval_lda(rho);
        vxc[i] = x.v_xc;
        exc[i] = x.e_xc;
    }
    (vh, vxc, exc)
}

/// `(n, l)` of one shell.
pub type Shell = (u32, u32);

/// `(n, l, occupation)` of one shell.
pub type ShellOccupation = (u32, u32, f64);

/// Aufbau occupations for `n_ele` electrons plus the first empty `(n, l)`;
/// open shells are spherically averaged.
pub fn aufbau(n_ele: usize) -> Result<(Vec<ShellOccupation>, Option<Shell>)> {
    let mut left = n_ele as f64;
    let mut occ = Vec::new();
    let mut lumo = None;
    for &(n, l) in &SHELLS {
        if left <= 0.0 {
            lumo = Some((n, l));
            break;
        }
        let cap = 2.0 * (2 * l + 1) as f64;
        let f = left.min(cap);
        occ.push((n, l, f));
        left -= f;
    }
    if left > 0.0 {
        return contract(format!("{n_ele} electrons exceed the supported shells"));
    }
    Ok((occ, lumo))
}

/// Self-consistent spin-unpolarized LDA atom. Results are Richardson
/// extrapolated from two log-grid spacings.
pub fn radial_lda_solve(z: f64, n_ele: usize) -> Result<RadialLdaResult> {
    if !(z > 0.0) || n_ele == 0 {
        return contract("radial solve needs Z > 0 and at least one electron");
    }
    let (occ, lumo) = aufbau(n_ele)?;
    let coarse = solve_on_grid(z, &occ, lumo, 0.01)?;
    let fine = solve_on_grid(z, &occ, lumo, 0.005)?;
    let extrap = |c: f64, f: f64| f + (f - c) / 3.0;
    let levels = fine
        .levels
        .iter()
        .zip(&coarse.levels)
        .map(|(f, c)| RadialLevel { energy: extrap(c.energy, f.energy), ..f.clone() })
        .collect();
    Ok(RadialLdaResult {
        levels,
        total_energy: extrap(coarse.total_energy, fine.total_energy),
        iterations: fine.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(8);
        for k in 0..16 {
            let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum();
            let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
            assert!((q - exact).abs() < 1e-14, "k={k}");
        }
    }

    #[test]
    fn orbital_norms() {
        let pts = uniform_mesh(60.0, 6001);
        let (gx, gw) = gauss_legendre(8);
        let norm = |o: RadialOrbital| -> f64 {
            pts.windows(2)
                .map(|s| {
                    let half = 0.5 * (s[1] - s[0]);
                    gx.iter()
                        .zip(&gw)
                        .map(|(t, w)| w * half * o.eval(0.5 * (s[0] + s[1]) + half * t).powi(2))
                        .sum::<f64>()
                })
                .sum()
        };
        assert!((norm(RadialOrbital::S1) - 1.0).abs() < 1e-6);
        assert!((norm(RadialOrbital::P2) - 1.0).abs() < 1e-6);
        assert!((norm(RadialOrbital::S2) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn linear_data_has_zero_error() {
        let pts = vec![0.0, 0.3, 1.0, 2.5];
        assert!(interp_l2_error(|r| 3.0 * r - 1.0, &pts).unwrap() < 1e-15);
        assert!(interp_l2_error(|r| r, &[0.0, 2.0, 1.0]).is_err());
    }

    #[test]
    fn uniform_halving_is_second_order() {
        for o in RadialOrbital::ALL {
            let e1 = interp_l2_error(|r| o.eval(r), &uniform_mesh(30.0, 401)).unwrap();
            let e2 = interp_l2_error(|r| o.eval(r), &uniform_mesh(30.0, 801)).unwrap();
            let ratio = e1 / e2;
            assert!((3.8..=4.2).contains(&ratio), "{} ratio {ratio}", o.label());
        }
    }

    #[test]
    fn error_decreases_under_point_insertion() {
        let coarse = uniform_mesh(30.0, 40);
        let mut fine = coarse.clone();
        fine.extend([0.1, 0.2, 1.7, 13.3]);
        fine.sort_by(f64::total_cmp);
        for o in RadialOrbital::ALL {
            let a = interp_l2_error(|r| o.eval(r), &coarse).unwrap();
            let b = interp_l2_error(|r| o.eval(r), &fine).unwrap();
            assert!(b <= a);
        }
    }

    #[test]
    fn equidistribution_converges_and_coarsens_the_tail() {
        let m = equidistribute(&[RadialOrbital::P2], 30, 30.0).unwrap();
        assert!(m.converged, "ratio {}", m.ratio);
        let h: Vec<f64> = m.points.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(h[h.len() - 1] > h[h.len() / 2]);
    }

    #[test]
    fn aufbau_fills_shells() {
        let (occ, lumo) = aufbau(4).unwrap();
        assert_eq!(occ, vec![(1, 0, 2.0), (2, 0, 2.0)]);
        assert_eq!(lumo, Some((2, 1)));
        assert!(aufbau(40).is_err());
    }
}
