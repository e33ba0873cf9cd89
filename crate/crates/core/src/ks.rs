//! Kohn-Sham assembly and observables: external potential, Hamiltonian and
//! overlap matrices, densities, total energy and the HOMO-LUMO gap.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::fespace::{integrate_cross_with, Element, FeSpace, Field};
use crate::geometry::{self, Point3};
use crate::hgt::Hgt;
use crate::par;
use crate::quadrature::Quadrature;
use crate::sparse::{Pattern, SparseMatrix};
use crate::xc;

const SYMBOLS: [&str; 18] =
    ["H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar"];

/// Atomic number for an element symbol, case-insensitive, up to argon.
pub fn atomic_number(symbol: &str) -> Option<u32> {
    SYMBOLS.iter().position(|s| s.eq_ignore_ascii_case(symbol)).map(|i| i as u32 + 1)
}

pub fn element_symbol(z: u32) -> Option<&'static str> {
    SYMBOLS.get((z as usize).wrapping_sub(1)).copied()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomSpec {
    /// Position in Bohr.
    pub position: Point3,
    pub charge: f64,
}

impl AtomSpec {
    pub fn new(charge: f64, position: Point3) -> Self {
        AtomSpec { position, charge }
    }
}

pub fn electron_count(atoms: &[AtomSpec]) -> usize {
    atoms.iter().map(|a| a.charge.round() as usize).sum()
}

/// Closed-shell filling: doubly occupied orbitals and one singly occupied
/// orbital for an odd electron count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OccupationRule {
    pub n_ele: usize,
    pub n_occ: usize,
}

impl OccupationRule {
    pub fn new(n_ele: usize) -> Self {
        OccupationRule { n_ele, n_occ: n_ele.div_ceil(2) }
    }

    /// Occupations of the lowest `n_orb` orbitals; extra orbitals are empty.
    pub fn occupations(&self, n_orb: usize) -> Vec<f64> {
        (0..n_orb)
            .map(|l| {
                if l + 1 < self.n_occ || (l + 1 == self.n_occ && self.n_ele.is_multiple_of(2)) {
                    2.0
                } else if l + 1 == self.n_occ {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }
}

pub fn external_potential(atoms: &[AtomSpec], p: &Point3) -> f64 {
    atoms.iter().map(|a| -a.charge / geometry::dist(p, &a.position)).sum()
}

/// Which terms enter the Hamiltonian.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HamiltonianMode {
    /// Kinetic, nuclear, Hartree and LDA exchange-correlation.
    Lda,
    /// Kinetic and nuclear terms only: the non-interacting problem.
    Bare,
}

/// Quadrature points of an element, nudged off any nucleus they hit.
pub(crate) fn element_points(el: &Element, quad: &Quadrature, atoms: &[AtomSpec]) -> Vec<Point3> {
    let h = el.diameter();
    let edge = geometry::sub(&el.x[1], &el.x[0]);
    quad.points
        .iter()
        .map(|l| {
            let mut p = Quadrature::map(&el.x, l);
            if atoms.iter().any(|a| geometry::dist(&p, &a.position) <= 1e-14 * h) {
                let s = 1e-8 * h / geometry::norm(&edge);
                for k in 0..3 {
                    p[k] += s * edge[k];
                }
            }
            p
        })
        .collect()
}

/// Evaluates a field at points inside a given leaf of another space.
pub(crate) struct Probe<'a> {
    tree: &'a Hgt,
    space: &'a FeSpace,
    field: &'a Field,
}

impl<'a> Probe<'a> {
    pub(crate) fn new(tree: &'a Hgt, space: &'a FeSpace, field: &'a Field) -> Result<Self> {
        field.check_current(field.space())?;
        tree.check_view(field.space().view())?;
        Ok(Probe { tree, space, field })
    }

    /// Value at `p`, which lies in element `el` of the probing space.
    pub(crate) fn at(&self, el: &Element, l: &[f64; 4], p: &Point3) -> f64 {
        if std::ptr::eq(self.space, self.field.space().as_ref()) {
            return el.interpolate(self.field.coeffs(), l);
        }
        let hint = self.space.view().leaves()[el.leaf as usize];
        self.field.evaluate_near(self.tree, hint, p)
    }
}

/// Effective potential pieces at the quadrature points of one element.
pub(crate) fn potential_at(
    el: &Element,
    quad: &Quadrature,
    atoms: &[AtomSpec],
    phi: Option<&Probe>,
    rho: Option<&Probe>,
) -> Vec<f64> {
    let pts = element_points(el, quad, atoms);
    pts.iter()
        .zip(&quad.points)
        .map(|(p, l)| {
            let mut v = external_potential(atoms, p);
            if let Some(phi) = phi {
                v += phi.at(el, l, p);
            }
            if let Some(rho) = rho {
                v += xc::eval_lda(rho.at(el, l, p)).v_xc;
            }
            v
        })
        .collect()
}

/// Matrices that depend only on the mesh, cached for repeated assembly.
pub struct KsSystem {
    space: Arc<FeSpace>,
    pattern: Pattern,
    kinetic: SparseMatrix,
    mass: SparseMatrix,
}

impl KsSystem {
    pub fn new(space: Arc<FeSpace>) -> Result<Self> {
        let pattern = Pattern::from_space(&space);
        let kinetic = SparseMatrix::assemble(&space, &pattern, |e| {
            let mut k = e.stiffness();
            k.iter_mut().flatten().for_each(|x| *x *= 0.5);
            k
        })?;
        let mass = SparseMatrix::assemble(&space, &pattern, |e| e.mass())?;
        Ok(KsSystem { space, pattern, kinetic, mass })
    }

    pub fn space(&self) -> &Arc<FeSpace> {
        &self.space
    }

    /// Half the stiffness matrix.
    pub fn kinetic(&self) -> &SparseMatrix {
        &self.kinetic
    }

    pub fn mass(&self) -> &SparseMatrix {
        &self.mass
    }

    /// `A = 1/2 K + V_ext + phi + v_xc(rho)`. `phi` and `rho` may live on any
    /// mesh of the tree and are ignored in bare mode.
    pub fn hamiltonian(
        &self,
        tree: &Hgt,
        atoms: &[AtomSpec],
        phi: Option<&Field>,
        rho: Option<&Field>,
        mode: HamiltonianMode,
    ) -> Result<SparseMatrix> {
        let (phi, rho) = match mode {
            HamiltonianMode::Lda => (phi, rho),
            HamiltonianMode::Bare => (None, None),
        };
        if atoms.is_empty() && phi.is_none() && rho.is_none() {
            return Ok(self.kinetic.clone());
        }
        let phi = phi.map(|f| Probe::new(tree, &self.space, f)).transpose()?;
        let rho = rho.map(|f| Probe::new(tree, &self.space, f)).transpose()?;
        let quad = Quadrature::assembly();
        let pot = SparseMatrix::assemble(&self.space, &self.pattern, |el| {
            let v = potential_at(el, &quad, atoms, phi.as_ref(), rho.as_ref());
            let mut m = [[0.0; 4]; 4];
            for ((l, w), vq) in quad.points.iter().zip(&quad.weights).zip(&v) {
                let s = w * el.volume * vq;
                for i in 0..4 {
                    for j in 0..4 {
                        m[i][j] += s * l[i] * l[j];
                    }
                }
            }
            m
        })?;
        self.kinetic.lin_comb(1.0, &pot, 1.0)
    }
}

/// One split group: its mesh, orbitals and eigenvalues.
#[derive(Clone, Debug)]
pub struct EigenGroup {
    pub index: usize,
    pub space: Arc<FeSpace>,
    pub orbitals: Vec<Field>,
    pub eigenvalues: Vec<f64>,
    pub occupations: Vec<f64>,
}

impl EigenGroup {
    pub fn len(&self) -> usize {
        self.orbitals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orbitals.is_empty()
    }

    pub fn occupied(&self) -> impl Iterator<Item = (&Field, f64)> {
        self.orbitals.iter().zip(self.occupations.iter().copied()).filter(|(_, f)| *f > 0.0)
    }
}

/// `rho = sum f |psi|^2` at the dofs of `target`, with each orbital
/// interpolated onto `target` first.
pub fn compute_density(tree: &Hgt, groups: &[EigenGroup], target: &Arc<FeSpace>) -> Result<Field> {
    let mut rho = vec![0.0; target.n_dofs()];
    for g in groups {
        for (psi, f) in g.occupied() {
            let on = psi.interpolate(tree, target)?;
            for (r, v) in rho.iter_mut().zip(on.coeffs()) {
                *r += f * v * v;
            }
        }
    }
    Field::new(target.clone(), rho)
}

/// Integral of a field over the domain.
pub fn integrate(field: &Field) -> f64 {
    let els = field.space().elements();
    par::sum_range(els.len(), |k| {
        let e = &els[k];
        e.volume * e.dofs.iter().map(|&d| field.coeffs()[d as usize]).sum::<f64>() / 4.0
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyTerms {
    pub band: f64,
    pub hartree: f64,
    /// `int rho (e_xc - v_xc)`.
    pub xc_correction: f64,
    pub total: f64,
}

/// `E = sum f eps - E_H + int rho (e_xc - v_xc)` with the orbital density.
/// All integrals run over the finest common cells of the meshes involved.
pub fn total_energy(
    tree: &Hgt,
    groups: &[EigenGroup],
    phi: Option<&Field>,
    mode: HamiltonianMode,
) -> Result<EnergyTerms> {
    let mut band = 0.0;
    let mut fields: Vec<&Field> = Vec::new();
    let mut occ: Vec<f64> = Vec::new();
    for g in groups {
        for ((psi, f), e) in g.orbitals.iter().zip(&g.occupations).zip(&g.eigenvalues) {
            if *f > 0.0 {
                band += f * e;
                fields.push(psi);
                occ.push(*f);
            }
        }
    }
    if mode == HamiltonianMode::Bare || fields.is_empty() {
        return Ok(EnergyTerms { band, total: band, ..Default::default() });
    }
    let quad = Quadrature::assembly();
    let density = |v: &[f64]| v.iter().zip(&occ).map(|(x, f)| f * x * x).sum::<f64>();
    let xc_correction = integrate_cross_with(tree, &fields, &quad, |v, _| {
        let rho = density(v);
        let e = xc::eval_lda(rho);
        rho * (e.e_xc - e.v_xc)
    })?;
    let hartree = match phi {
        Some(phi) => {
            let mut all = vec![phi];
            all.extend(fields.iter().copied());
            0.5 * integrate_cross_with(tree, &all, &quad, |v, _| v[0] * density(&v[1..]))?
        }
        None => 0.0,
    };
    Ok(EnergyTerms { band, hartree, xc_correction, total: band - hartree + xc_correction })
}

/// `eps_LUMO - eps_HOMO` from ascending eigenvalues.
pub fn homo_lumo_gap(eigenvalues: &[f64], n_occ: usize) -> Result<f64> {
    if n_occ == 0 || eigenvalues.len() < n_occ + 1 {
        return Err(Error::Arity(format!("gap needs {} eigenvalues, got {}", n_occ + 1, eigenvalues.len())));
    }
    Ok(eigenvalues[n_occ] - eigenvalues[n_occ - 1])
}

/// Hydrogen-like shell functions centered on the atoms, ordered by their
/// bare energy `-Z^2 / 2n^2`.
fn shell_functions(atoms: &[AtomSpec]) -> Vec<(f64, usize, usize)> {
    // (energy, atom, shell kind) with kinds 0 = 1s, 1 = 2s, 2..=4 = 2p, 5 = 3s, 6..=8 = 3p
    let mut out = Vec::new();
    for (ia, a) in atoms.iter().enumerate() {
        for kind in 0..9 {
            let n = match kind {
                0 => 1.0,
                1..=4 => 2.0,
                _ => 3.0,
            };
            out.push((-a.charge * a.charge / (2.0 * n * n), ia, kind));
        }
    }
    out.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    out
}

fn shell_value(a: &AtomSpec, kind: usize, p: &Point3) -> f64 {
    let d = geometry::sub(p, &a.position);
    let r = geometry::norm(&d);
    let z = a.charge;
    match kind {
        0 => (-z * r).exp(),
        1 => (1.0 - z * r / 2.0) * (-z * r / 2.0).exp(),
        2..=4 => d[kind - 2] * (-z * r / 2.0).exp(),
        5 => (1.0 - 2.0 * z * r / 3.0 + 2.0 * (z * r).powi(2) / 27.0) * (-z * r / 3.0).exp(),
        _ => d[kind - 6] * (1.0 - z * r / 6.0) * (-z * r / 3.0).exp(),
    }
}

/// Initial block of `k` orbitals sampled at the dofs. Columns without a
/// shell function, or all columns when `random` is set, are random.
pub fn initial_guess(space: &FeSpace, atoms: &[AtomSpec], k: usize, seed: u64, random: bool) -> DMatrix<f64> {
    let n = space.n_dofs();
    let shells = if random { Vec::new() } else { shell_functions(atoms) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(n, k);
    for j in 0..k {
        if let Some(&(_, ia, kind)) = shells.get(j) {
            let col = space.interpolate_fn(|p| shell_value(&atoms[ia], kind, p));
            for (i, v) in col.into_iter().enumerate() {
                x[(i, j)] = v;
            }
        } else {
            for i in 0..n {
                x[(i, j)] = rng.gen_range(-1.0..1.0);
            }
        }
    }
    let boundary = space.boundary();
    for i in 0..n {
        if boundary[i] {
            x.row_mut(i).fill(0.0);
        }
    }
    x
}

/// Fields from the columns of an eigenvector block.
pub fn columns_to_fields(space: &Arc<FeSpace>, x: &DMatrix<f64>) -> Result<Vec<Field>> {
    if x.nrows() != space.n_dofs() {
        return contract("eigenvector block does not match the space");
    }
    (0..x.ncols()).map(|j| Field::new(space.clone(), x.column(j).iter().copied().collect())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn occupation_rule() {
        let r = OccupationRule::new(3);
        assert_eq!(r.n_occ, 2);
        assert_eq!(r.occupations(3), vec![2.0, 1.0, 0.0]);
        let r = OccupationRule::new(4);
        assert_eq!(r.occupations(3), vec![2.0, 2.0, 0.0]);
        assert_eq!(OccupationRule::new(1).occupations(1), vec![1.0]);
        for n in 1..20 {
            let r = OccupationRule::new(n);
            assert_eq!(r.occupations(r.n_occ).iter().sum::<f64>(), n as f64);
        }
    }

    #[test]
    fn gap_values() {
        let g = homo_lumo_gap(&[-3.8, -0.205662, -0.077866], 2).unwrap();
        assert!((g - 0.127796).abs() < 1e-12);
        let g = homo_lumo_gap(&[-3.8, -0.206129, -0.077331], 2).unwrap();
        assert!((g - 0.128798).abs() < 1e-12);
        assert_eq!(homo_lumo_gap(&[-1.0, -0.5, -0.5], 2).unwrap(), 0.0);
        assert!(matches!(homo_lumo_gap(&[-1.0, -0.5], 2), Err(Error::Arity(_))));
    }

    #[test]
    fn element_table() {
        assert_eq!(atomic_number("li"), Some(3));
        assert_eq!(atomic_number("Ar"), Some(18));
        assert_eq!(atomic_number("K"), None);
        assert_eq!(element_symbol(8), Some("O"));
        assert_eq!(element_symbol(0), None);
    }

    #[test]
    fn kinetic_only_when_no_potential() {
        let tree = Hgt::cube(1.0, 2).unwrap();
        let space = Arc::new(FeSpace::build(&tree, &tree.root_view()).unwrap());
        let sys = KsSystem::new(space.clone()).unwrap();
        let a = sys.hamiltonian(&tree, &[], None, None, HamiltonianMode::Lda).unwrap();
        let ones = vec![1.0; space.n_dofs()];
        assert!(a.mul(&ones).iter().all(|x| x.abs() < 1e-12));
        assert!((sys.mass().inner(&ones, &ones) - 8.0).abs() < 1e-12);
    }
}
