//! Hartree potential: multipole boundary data and the Poisson solve
//! `-lap phi = 4 pi rho` on a dedicated mesh.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::fespace::{FeSpace, Field};
use crate::geometry::{self, Point3};
use crate::hgt::Hgt;
use crate::par;
use crate::quadrature::Quadrature;
use crate::sparse::{cg_solve, Jacobi, Pattern, SparseMatrix};

const FOUR_PI: f64 = 4.0 * std::f64::consts::PI;

#[derive(Clone, Debug, PartialEq)]
pub struct MultipoleMoments {
    pub charge: f64,
    /// Density centroid, the expansion center.
    pub center: Point3,
    pub dipole: Point3,
    /// `q_ij = 1/2 int rho (x_i - c_i)(x_j - c_j)`.
    pub quadrupole: [[f64; 3]; 3],
}

impl MultipoleMoments {
    pub fn monopole(charge: f64, center: Point3) -> Self {
        MultipoleMoments { charge, center, dipole: [0.0; 3], quadrupole: [[0.0; 3]; 3] }
    }

    /// Truncated expansion at `p`.
    pub fn potential(&self, p: &Point3) -> Result<f64> {
        let d = geometry::sub(p, &self.center);
        let r2 = geometry::dot(&d, &d);
        let r = r2.sqrt();
        if r < 1e-12 {
            return Err(Error::Singular(format!("multipole evaluated at its center {:?}", self.center)));
        }
        let r3 = r2 * r;
        let r5 = r3 * r2;
        let mut v = self.charge / r + geometry::dot(&self.dipole, &d) / r3;
        for i in 0..3 {
            for j in 0..3 {
                let delta = if i == j { r2 } else { 0.0 };
                v += self.quadrupole[i][j] * (3.0 * d[i] * d[j] - delta) / r5;
            }
        }
        Ok(v)
    }
}

pub fn boundary_values(m: &MultipoleMoments, points: &[Point3]) -> Result<Vec<f64>> {
    points.iter().map(|p| m.potential(p)).collect()
}

/// Integrals of `[1, x, y, z, xx, xy, xz, yy, yz, zz]` against `f` over the
/// space's elements, with coordinates shifted by `c`.
fn raw_moments<F>(space: &FeSpace, c: &Point3, f: F) -> [f64; 10]
where
    F: Fn(usize, &[f64; 4]) -> f64 + Sync + Send,
{
    let quad = Quadrature::assembly();
    let els = space.elements();
    let per: Vec<[f64; 10]> = par::map_range(els.len(), |k| {
        let el = &els[k];
        let mut acc = [0.0; 10];
        for (l, w) in quad.points.iter().zip(&quad.weights) {
            let p = geometry::sub(&Quadrature::map(&el.x, l), c);
            let v = w * el.volume * f(k, l);
            let terms =
                [1.0, p[0], p[1], p[2], p[0] * p[0], p[0] * p[1], p[0] * p[2], p[1] * p[1], p[1] * p[2], p[2] * p[2]];
            for (a, t) in acc.iter_mut().zip(terms) {
                *a += v * t;
            }
        }
        acc
    });
    let mut total = [0.0; 10];
    for a in per {
        for (t, x) in total.iter_mut().zip(a) {
            *t += x;
        }
    }
    total
}

fn moments_from<F>(space: &FeSpace, f: F) -> Result<MultipoleMoments>
where
    F: Fn(usize, &[f64; 4]) -> f64 + Sync + Send,
{
    let first = raw_moments(space, &[0.0; 3], &f);
    let q = first[0];
    if !(q > 0.0) {
        return Err(Error::InvalidDensity(format!("total charge {q:e} is not positive")));
    }
    let center = [first[1] / q, first[2] / q, first[3] / q];
    let m = raw_moments(space, &center, &f);
    let quad = [[m[4], m[5], m[6]], [m[5], m[7], m[8]], [m[6], m[8], m[9]]].map(|row| row.map(|x| 0.5 * x));
    Ok(MultipoleMoments { charge: q, center, dipole: [m[1], m[2], m[3]], quadrupole: quad })
}

/// Moments of a density field, integrated on its own mesh.
pub fn compute_moments(rho: &Field) -> Result<MultipoleMoments> {
    rho.check_current(rho.space())?;
    let space = rho.space().clone();
    let c = rho.coeffs();
    moments_from(&space, |k, l| space.elements()[k].interpolate(c, l))
}

/// Moments of an analytic density.
pub fn compute_moments_fn<F>(space: &FeSpace, rho: F) -> Result<MultipoleMoments>
where
    F: Fn(&Point3) -> f64 + Sync + Send,
{
    moments_from(space, |k, l| rho(&Quadrature::map(&space.elements()[k].x, l)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoissonOptions {
    /// Relative CG residual tolerance.
    pub tol: f64,
    pub maxit: usize,
}

impl Default for PoissonOptions {
    fn default() -> Self {
        PoissonOptions { tol: 1e-10, maxit: 20_000 }
    }
}

#[derive(Clone, Debug)]
pub struct HartreeSolution {
    pub phi: Field,
    /// `None` when the density vanishes identically.
    pub moments: Option<MultipoleMoments>,
    pub cg_iterations: usize,
}

/// Stiffness and mass matrices of one Hartree mesh, reused across solves.
pub struct PoissonSystem {
    space: Arc<FeSpace>,
    stiffness: SparseMatrix,
    mass: SparseMatrix,
}

impl PoissonSystem {
    pub fn new(space: Arc<FeSpace>) -> Result<Self> {
        let pattern = Pattern::from_space(&space);
        let stiffness = SparseMatrix::assemble(&space, &pattern, |e| e.stiffness())?;
        let mass = SparseMatrix::assemble(&space, &pattern, |e| e.mass())?;
        Ok(PoissonSystem { space, stiffness, mass })
    }

    pub fn space(&self) -> &Arc<FeSpace> {
        &self.space
    }

    pub fn mass(&self) -> &SparseMatrix {
        &self.mass
    }

    /// Load vector `b_i = int 4 pi f phi_i` of an analytic density.
    pub fn load_fn<F>(&self, f: F) -> Vec<f64>
    where
        F: Fn(&Point3) -> f64 + Sync + Send,
    {
        let quad = Quadrature::assembly();
        let els = self.space.elements();
        let local: Vec<[f64; 4]> = par::map_range(els.len(), |k| {
            let el = &els[k];
            let mut b = [0.0; 4];
            for (l, w) in quad.points.iter().zip(&quad.weights) {
                let v = FOUR_PI * w * el.volume * f(&Quadrature::map(&el.x, l));
                for i in 0..4 {
                    b[i] += v * l[i];
                }
            }
            b
        });
        let mut b = vec![0.0; self.space.n_dofs()];
        for (el, lb) in els.iter().zip(local) {
            for i in 0..4 {
                b[el.dofs[i] as usize] += lb[i];
            }
        }
        b
    }

    /// Solve with load `b` and Dirichlet values `g` on the boundary dofs.
    pub fn solve_with(&self, b: &[f64], g: &[f64], opts: &PoissonOptions) -> Result<(Vec<f64>, usize)> {
        let n = self.space.n_dofs();
        if b.len() != n || g.len() != n {
            return contract("poisson data has the wrong length");
        }
        let fixed = self.space.boundary();
        let (a, rhs) = self.stiffness.apply_dirichlet(b, fixed, g)?;
        if rhs.iter().all(|&x| x == 0.0) {
            return Ok((vec![0.0; n], 0));
        }
        let x0: Vec<f64> = (0..n).map(|i| if fixed[i] { g[i] } else { 0.0 }).collect();
        let res = cg_solve(&a, &rhs, &x0, opts.tol, opts.maxit, &Jacobi::new(&a))?;
        if !res.converged {
            return Err(Error::NotConverged(format!(
                "Hartree CG stopped after {} iterations with residual {:e}",
                res.iterations,
                res.residuals.last().copied().unwrap_or(f64::NAN)
            )));
        }
        Ok((res.x, res.iterations))
    }

    /// Multipole boundary values for the given moments at the boundary dofs.
    pub fn boundary_data(&self, m: &MultipoleMoments) -> Result<Vec<f64>> {
        let pts = self.space.dof_points();
        let fixed = self.space.boundary();
        (0..pts.len()).map(|i| if fixed[i] { m.potential(&pts[i]) } else { Ok(0.0) }).collect()
    }

    /// Hartree potential of `rho`, which is interpolated onto this mesh
    /// first when it lives elsewhere.
    pub fn solve(&self, tree: &Hgt, rho: &Field, opts: &PoissonOptions) -> Result<HartreeSolution> {
        let rho = if Arc::ptr_eq(rho.space(), &self.space) { rho.clone() } else { rho.interpolate(tree, &self.space)? };
        rho.check_current(&self.space)?;
        if rho.coeffs().iter().all(|&x| x == 0.0) {
            return Ok(HartreeSolution { phi: Field::zeros(self.space.clone()), moments: None, cg_iterations: 0 });
        }
        let moments = compute_moments(&rho)?;
        let g = self.boundary_data(&moments)?;
        let mut b = self.mass.mul(rho.coeffs());
        b.iter_mut().for_each(|x| *x *= FOUR_PI);
        let (x, it) = self.solve_with(&b, &g, opts)?;
        Ok(HartreeSolution { phi: Field::new(self.space.clone(), x)?, moments: Some(moments), cg_iterations: it })
    }
}

/// One-shot Hartree solve on `space`.
pub fn solve_hartree(tree: &Hgt, rho: &Field, space: &Arc<FeSpace>, opts: &PoissonOptions) -> Result<HartreeSolution> {
    PoissonSystem::new(space.clone())?.solve(tree, rho, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monopole_and_quadrupole_values() {
        let m = MultipoleMoments::monopole(1.0, [0.0; 3]);
        assert!((m.potential(&[10.0, 0.0, 0.0]).unwrap() - 0.1).abs() < 1e-15);
        assert!(matches!(m.potential(&[0.0; 3]), Err(Error::Singular(_))));
        let mut q = MultipoleMoments::monopole(0.0, [0.0; 3]);
        q.quadrupole[0][0] = 1.0;
        let d = 3.0;
        assert!((q.potential(&[d, 0.0, 0.0]).unwrap() - 2.0 / (d * d * d)).abs() < 1e-15);
        let far = boundary_values(&m, &[[20.0, 0.0, 0.0], [40.0, 0.0, 0.0]]).unwrap();
        assert!((far[0] / far[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn moments_of_symmetric_blobs() {
        let tree = Hgt::cube(4.0, 8).unwrap();
        let space = Arc::new(FeSpace::build(&tree, &tree.root_view()).unwrap());
        let g = |p: &Point3, a: f64| (-((p[0] - a).powi(2) + p[1] * p[1] + p[2] * p[2])).exp();
        let one = compute_moments_fn(&space, |p| g(p, 0.0)).unwrap();
        assert!(geometry::norm(&one.center) < 1e-12);
        assert!((one.quadrupole[0][0] - one.quadrupole[1][1]).abs() < 1e-10);
        let two = compute_moments_fn(&space, |p| g(p, 1.0) + g(p, -1.0)).unwrap();
        assert!(geometry::norm(&two.center) < 1e-12);
        assert!(geometry::norm(&two.dipole) < 1e-10 * two.charge);
        assert!(two.quadrupole[0][0] > two.quadrupole[1][1]);
        assert!((two.quadrupole[1][1] - two.quadrupole[2][2]).abs() < 1e-10);
        let scaled = compute_moments_fn(&space, |p| 3.0 * (g(p, 1.0) + g(p, -1.0))).unwrap();
        assert!((scaled.charge - 3.0 * two.charge).abs() < 1e-12 * scaled.charge);
        assert!((scaled.quadrupole[0][0] - 3.0 * two.quadrupole[0][0]).abs() < 1e-12);
    }

    #[test]
    fn zero_density_gives_zero_potential() {
        let tree = Hgt::cube(2.0, 2).unwrap();
        let space = Arc::new(FeSpace::build(&tree, &tree.root_view()).unwrap());
        let rho = Field::zeros(space.clone());
        let sol = solve_hartree(&tree, &rho, &space, &PoissonOptions::default()).unwrap();
        assert!(sol.phi.coeffs().iter().all(|&x| x == 0.0));
        assert!(matches!(compute_moments(&rho), Err(Error::InvalidDensity(_))));
    }
}
