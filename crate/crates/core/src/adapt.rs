//! Residual a posteriori indicators, per-orbital normalization and marking.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::fespace::{FeSpace, Field};
use crate::geometry::{self, Point3};
use crate::hgt::{Hgt, MeshView, NodeId, TET_FACES};
use crate::ks::{potential_at, AtomSpec, HamiltonianMode, Probe};
use crate::par;
use crate::quadrature::Quadrature;

/// Per-leaf indicator values of one mesh view, in leaf order.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorField {
    generation: u64,
    pub eta: Vec<f64>,
}

impl ErrorField {
    pub fn new(view: &MeshView, eta: Vec<f64>) -> Result<Self> {
        if eta.len() != view.n_leaves() {
            return contract("indicator length differs from the leaf count");
        }
        if eta.iter().any(|x| !(*x >= 0.0)) {
            return contract("indicators must be non-negative");
        }
        Ok(ErrorField { generation: view.generation(), eta })
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn max(&self) -> f64 {
        self.eta.iter().copied().fold(0.0, f64::max)
    }

    /// Root sum of squares over all leaves.
    pub fn global(&self) -> f64 {
        self.eta.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// How each orbital's indicator is scaled before the orbitals are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    Max,
    L2,
    Sum,
    None,
}

impl Normalization {
    fn apply(self, eta2: &mut [f64]) {
        let scale = match self {
            Normalization::Max => eta2.iter().copied().fold(0.0, f64::max).sqrt(),
            Normalization::L2 => eta2.iter().sum::<f64>().sqrt(),
            Normalization::Sum => eta2.iter().map(|x| x.sqrt()).sum(),
            Normalization::None => 1.0,
        };
        if scale > 0.0 {
            let s2 = scale * scale;
            eta2.iter_mut().for_each(|x| *x /= s2);
        }
    }
}

/// Interior faces of a space's elements.
struct Face {
    elems: [u32; 2],
    /// Unit normal pointing out of `elems[0]`.
    normal: Point3,
    area: f64,
    diameter: f64,
}

fn interior_faces(space: &FeSpace) -> Vec<Face> {
    let els = space.elements();
    let mut open: HashMap<[u32; 3], (u32, usize)> = HashMap::with_capacity(2 * els.len());
    let mut faces = Vec::new();
    for (k, el) in els.iter().enumerate() {
        for (opp, f) in TET_FACES.iter().enumerate() {
            let mut key = f.map(|i| el.dofs[i]);
            key.sort_unstable();
            if let Some((other, _)) = open.remove(&key) {
                let g = el.grads[opp];
                let n = geometry::norm(&g);
                // grad of the opposite barycentric points inwards
                let normal = [-g[0] / n, -g[1] / n, -g[2] / n];
                let p = f.map(|i| el.x[i]);
                let diameter =
                    geometry::dist(&p[0], &p[1]).max(geometry::dist(&p[0], &p[2])).max(geometry::dist(&p[1], &p[2]));
                faces.push(Face {
                    elems: [k as u32, other],
                    normal,
                    area: geometry::triangle_area(&p[0], &p[1], &p[2]),
                    diameter,
                });
            } else {
                open.insert(key, (k as u32, opp));
            }
        }
    }
    faces
}

/// Squared indicator per leaf from per-element residual norms and element
/// gradients of one function.
fn leaf_eta2(space: &FeSpace, tree: &Hgt, faces: &[Face], res2: &[f64], grads: &[Point3]) -> Vec<f64> {
    let view = space.view();
    let els = space.elements();
    let h2: Vec<f64> = view.leaves().iter().map(|&leaf| tree.cell_diameter(leaf).powi(2)).collect();
    let mut acc = vec![0.0; h2.len()];
    for (k, el) in els.iter().enumerate() {
        acc[el.leaf as usize] += h2[el.leaf as usize] * res2[k];
    }
    for f in faces {
        let [a, b] = f.elems;
        let d = geometry::sub(&grads[a as usize], &grads[b as usize]);
        let j = geometry::dot(&d, &f.normal);
        let c = 0.5 * f.diameter * j * j * f.area;
        acc[els[a as usize].leaf as usize] += c;
        acc[els[b as usize].leaf as usize] += c;
    }
    acc
}

/// Context for evaluating the effective potential inside the indicator.
pub struct PotentialContext<'a> {
    pub atoms: &'a [AtomSpec],
    pub phi: Option<&'a Field>,
    pub rho: Option<&'a Field>,
    pub mode: HamiltonianMode,
}

/// Residual indicator of one group's mesh: every orbital contributes its
/// interior residual `(V - eps) psi` and its gradient jumps; the orbital
/// indicators are normalized and combined by root sum of squares.
pub fn indicator_ks_group(
    tree: &Hgt,
    orbitals: &[Field],
    eigenvalues: &[f64],
    ctx: &PotentialContext,
    normalization: Normalization,
) -> Result<ErrorField> {
    let Some(first) = orbitals.first() else {
        return contract("indicator needs at least one orbital");
    };
    if eigenvalues.len() != orbitals.len() {
        return contract("one eigenvalue per orbital is required");
    }
    let space = first.space().clone();
    for o in orbitals {
        o.check_current(&space)?;
        if !std::sync::Arc::ptr_eq(o.space(), &space) {
            return contract("group orbitals must share one space");
        }
    }
    let (phi, rho) = match ctx.mode {
        HamiltonianMode::Lda => (ctx.phi, ctx.rho),
        HamiltonianMode::Bare => (None, None),
    };
    let phi = phi.map(|f| Probe::new(tree, &space, f)).transpose()?;
    let rho = rho.map(|f| Probe::new(tree, &space, f)).transpose()?;
    let quad = Quadrature::assembly();
    let els = space.elements();
    let pot: Vec<Vec<f64>> =
        par::map_range(els.len(), |k| potential_at(&els[k], &quad, ctx.atoms, phi.as_ref(), rho.as_ref()));
    let faces = interior_faces(&space);
    let mut total = vec![0.0; space.view().n_leaves()];
    for (psi, &eps) in orbitals.iter().zip(eigenvalues) {
        let c = psi.coeffs();
        let res2: Vec<f64> = par::map_range(els.len(), |k| {
            let el = &els[k];
            quad.points
                .iter()
                .zip(&quad.weights)
                .zip(&pot[k])
                .map(|((l, w), v)| w * ((v - eps) * el.interpolate(c, l)).powi(2))
                .sum::<f64>()
                * el.volume
        });
        let grads: Vec<Point3> = par::map_range(els.len(), |k| els[k].gradient(c));
        let mut e2 = leaf_eta2(&space, tree, &faces, &res2, &grads);
        normalization.apply(&mut e2);
        for (t, x) in total.iter_mut().zip(e2) {
            *t += x;
        }
    }
    ErrorField::new(space.view(), total.into_iter().map(f64::sqrt).collect())
}

/// Indicator of the Hartree potential on its own mesh; the residual of a
/// linear potential is `4 pi rho`.
pub fn indicator_hartree(tree: &Hgt, phi: &Field, rho: &Field) -> Result<ErrorField> {
    let space = phi.space().clone();
    phi.check_current(&space)?;
    let probe = Probe::new(tree, &space, rho)?;
    let quad = Quadrature::assembly();
    let els = space.elements();
    let four_pi = 4.0 * std::f64::consts::PI;
    let res2: Vec<f64> = par::map_range(els.len(), |k| {
        let el = &els[k];
        quad.points
            .iter()
            .zip(&quad.weights)
            .map(|(l, w)| {
                let p = Quadrature::map(&el.x, l);
                w * (four_pi * probe.at(el, l, &p)).powi(2)
            })
            .sum::<f64>()
            * el.volume
    });
    let grads: Vec<Point3> = par::map_range(els.len(), |k| els[k].gradient(phi.coeffs()));
    let faces = interior_faces(&space);
    let e2 = leaf_eta2(&space, tree, &faces, &res2, &grads);
    ErrorField::new(space.view(), e2.into_iter().map(f64::sqrt).collect())
}

/// `sqrt(ks^2 + har^2)` per leaf of one mesh.
pub fn indicator_combined(ks: &ErrorField, har: &ErrorField) -> Result<ErrorField> {
    if ks.generation != har.generation || ks.eta.len() != har.eta.len() {
        return contract("indicators belong to different meshes");
    }
    Ok(ErrorField { generation: ks.generation, eta: ks.eta.iter().zip(&har.eta).map(|(a, b)| a.hypot(*b)).collect() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum MarkStrategy {
    /// Refine where `eta >= refine * max`, coarsen where `eta <= coarsen * max`.
    Maximum { refine: f64, coarsen: f64 },
    /// Refine where `eta > tol`, coarsen where `eta <= coarsen * tol`.
    Absolute { tol: f64, coarsen: f64 },
}

impl Default for MarkStrategy {
    fn default() -> Self {
        MarkStrategy::Maximum { refine: 0.5, coarsen: 0.05 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Marks {
    pub refine: Vec<NodeId>,
    /// Leaves whose whole sibling set may be folded into the parent.
    pub coarsen: Vec<NodeId>,
}

/// Select leaves to refine and complete sibling sets to coarsen. Both
/// lists follow the view's leaf order.
pub fn mark(tree: &Hgt, view: &MeshView, e: &ErrorField, strategy: MarkStrategy) -> Result<Marks> {
    if e.generation != view.generation() || e.eta.len() != view.n_leaves() {
        return contract("indicator does not belong to this view");
    }
    let max = e.max();
    let (refine_at, coarsen_at) = match strategy {
        MarkStrategy::Maximum { refine, coarsen } => {
            if !(0.0..1.0).contains(&refine) || !(0.0..1.0).contains(&coarsen) {
                return contract("marking fractions must lie in [0, 1)");
            }
            if max == 0.0 && refine > 0.0 {
                (f64::INFINITY, -1.0)
            } else {
                (refine * max, coarsen * max)
            }
        }
        MarkStrategy::Absolute { tol, coarsen } => {
            if !(tol > 0.0) {
                return contract("absolute marking needs a positive tolerance");
            }
            (tol * (1.0 + f64::EPSILON), coarsen * tol)
        }
    };
    let leaves = view.leaves();
    let refine: Vec<NodeId> = leaves.iter().zip(&e.eta).filter(|(_, &x)| x >= refine_at).map(|(&n, _)| n).collect();
    let low: Vec<bool> = e.eta.iter().map(|&x| x <= coarsen_at && x < refine_at).collect();
    let mut by_parent: BTreeMap<NodeId, usize> = BTreeMap::new();
    for (i, &leaf) in leaves.iter().enumerate() {
        if low[i] {
            if let Some(p) = tree.node(leaf).parent {
                *by_parent.entry(p).or_default() += 1;
            }
        }
    }
    let nc = tree.kind().n_children();
    let coarsen = leaves
        .iter()
        .enumerate()
        .filter(|&(i, &leaf)| low[i] && tree.node(leaf).parent.is_some_and(|p| by_parent.get(&p) == Some(&nc)))
        .map(|(_, &n)| n)
        .collect();
    Ok(Marks { refine, coarsen })
}

/// Coarsen then refine; returns the new view.
pub fn adapt_view(tree: &mut Hgt, view: &MeshView, marks: &Marks) -> Result<MeshView> {
    let (coarse, _) = tree.coarsen(view, &marks.coarsen)?;
    let refine: Vec<NodeId> = marks.refine.iter().copied().filter(|&n| coarse.is_leaf(n)).collect();
    tree.refine(&coarse, &refine)
}
