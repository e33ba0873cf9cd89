//! Splitting the wanted eigenpairs into groups that each get their own mesh.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::fespace::{FeSpace, Field};
use crate::hgt::{Hgt, MeshView};
use crate::ks::{columns_to_fields, electron_count, AtomSpec, EigenGroup, OccupationRule};
use crate::lobpcg::rayleigh_ritz;
use crate::sparse::SparseMatrix;

/// Default relative gap for [`SplitStrategy::EigenvalueGap`].
pub const DEFAULT_GAP_THETA: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SplitStrategy {
    /// Core orbitals first, valence orbitals second.
    CoreValence,
    /// Cut wherever `eps_{l+1} - eps_l > theta (eps_p - eps_1)` in coarse eigenvalues.
    EigenvalueGap { theta: f64 },
    /// Core/valence groups plus one extra group holding the LUMO.
    HomoLumo,
}

impl SplitStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            SplitStrategy::CoreValence => "core-valence",
            SplitStrategy::EigenvalueGap { .. } => "eigenvalue-gap",
            SplitStrategy::HomoLumo => "homo-lumo",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub strategy: SplitStrategy,
    pub group_sizes: Vec<usize>,
    /// Number of occupied orbitals.
    pub n_occ: usize,
}

impl SplitPlan {
    /// Total number of computed orbitals.
    pub fn total(&self) -> usize {
        self.group_sizes.iter().sum()
    }

    pub fn n_groups(&self) -> usize {
        self.group_sizes.len()
    }

    /// Global orbital indices of each group.
    pub fn ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.group_sizes
            .iter()
            .map(|&p| {
                let r = start..start + p;
                start += p;
                r
            })
            .collect()
    }

    /// Index of the group holding only unoccupied orbitals, if any.
    pub fn lumo_group(&self) -> Option<usize> {
        match self.strategy {
            SplitStrategy::HomoLumo => Some(self.n_groups() - 1),
            _ => None,
        }
    }
}

/// Core orbitals per element for `Z <= 18`.
pub fn core_orbitals(z: u32) -> Result<usize> {
    match z {
        1..=2 => Ok(0),
        3..=10 => Ok(1),
        11..=18 => Ok(5),
        _ => Err(Error::UnsupportedElement(format!("Z = {z} has no core-orbital entry (supported: 1..=18)"))),
    }
}

fn atom_z(a: &AtomSpec) -> Result<u32> {
    let z = a.charge.round();
    if (a.charge - z).abs() > 1e-9 || z < 1.0 {
        return Err(Error::UnsupportedElement(format!("nuclear charge {}", a.charge)));
    }
    Ok(z as u32)
}

fn core_valence(atoms: &[AtomSpec], n_occ: usize) -> Result<Vec<usize>> {
    let mut core = 0;
    for a in atoms {
        core += core_orbitals(atom_z(a)?)?;
    }
    if core >= n_occ {
        return contract(format!("{core} core orbitals leave no valence orbitals out of {n_occ}"));
    }
    Ok(if core == 0 { vec![n_occ] } else { vec![core, n_occ - core] })
}

/// Split at every gap larger than `theta` times the eigenvalue spread.
pub fn gap_clusters(eigs: &[f64], theta: f64) -> Vec<usize> {
    if eigs.is_empty() {
        return Vec::new();
    }
    let spread = eigs[eigs.len() - 1] - eigs[0];
    let mut sizes = vec![1];
    for w in eigs.windows(2) {
        if w[1] - w[0] > theta * spread && spread > 0.0 {
            sizes.push(1);
        } else {
            *sizes.last_mut().unwrap() += 1;
        }
    }
    sizes
}

/// Group sizes for a molecule. `hints` are ascending coarse-mesh eigenvalues
/// covering at least the occupied orbitals.
pub fn make_plan(atoms: &[AtomSpec], strategy: SplitStrategy, hints: Option<&[f64]>) -> Result<SplitPlan> {
    if atoms.is_empty() {
        return Err(Error::Arity("no atoms".into()));
    }
    let n_occ = OccupationRule::new(electron_count(atoms)).n_occ;
    let group_sizes = match strategy {
        SplitStrategy::CoreValence => core_valence(atoms, n_occ)?,
        SplitStrategy::HomoLumo => {
            let mut g = core_valence(atoms, n_occ)?;
            g.push(1);
            g
        }
        SplitStrategy::EigenvalueGap { theta } => {
            let hints = hints.ok_or(Error::MissingHints)?;
            if hints.len() < n_occ {
                return Err(Error::Arity(format!("{} eigenvalue hints for {n_occ} occupied orbitals", hints.len())));
            }
            if !(theta > 0.0) {
                return contract("gap threshold must be positive");
            }
            gap_clusters(&hints[..n_occ], theta)
        }
    };
    Ok(SplitPlan { strategy, group_sizes, n_occ })
}

/// `merged / sum(groups)` from mesh sizes.
pub fn splitting_factor_counts(groups: &[usize], merged: usize) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::Arity("splitting factor of zero meshes".into()));
    }
    let total: usize = groups.iter().sum();
    if total == 0 {
        return contract("empty group meshes");
    }
    Ok(merged as f64 / total as f64)
}

/// Splitting factor with mesh size measured in vertices (the number of
/// piecewise-linear unknowns before hanging-node elimination).
pub fn splitting_factor(groups: &[&MeshView], merged: &MeshView) -> Result<f64> {
    if groups.iter().any(|v| v.tree_id() != merged.tree_id()) {
        return contract("splitting factor across different trees");
    }
    let counts: Vec<usize> = groups.iter().map(|v| v.n_vertices()).collect();
    splitting_factor_counts(&counts, merged.n_vertices())
}

/// Finest-cell union of the group meshes, balanced.
pub fn merge_meshes(tree: &mut Hgt, views: &[&MeshView]) -> Result<MeshView> {
    if views.is_empty() {
        return Err(Error::Arity("merge of zero meshes".into()));
    }
    tree.merge(views)
}

#[derive(Clone, Debug)]
pub struct MergedResult {
    pub group: EigenGroup,
    /// Input columns discarded as numerically dependent.
    pub dropped: usize,
    /// `max |<psi_i, M psi_j> - delta_ij|` of the returned orbitals.
    pub orthogonality: f64,
}

/// Interpolate every group's orbitals into `space` and rotate them by the
/// small pencil `(Y'AY) C = (Y'MY) C Lambda`.
pub fn orthogonalize_merged(
    tree: &Hgt,
    groups: &[EigenGroup],
    space: &Arc<FeSpace>,
    a: &SparseMatrix,
    m: &SparseMatrix,
) -> Result<MergedResult> {
    let n = space.n_dofs();
    if a.n() != n || m.n() != n {
        return contract("merged matrices do not match the merged space");
    }
    let mut cols: Vec<Field> = Vec::new();
    let mut occ: Vec<f64> = Vec::new();
    for g in groups {
        for (psi, f) in g.orbitals.iter().zip(&g.occupations) {
            cols.push(psi.interpolate(tree, space)?);
            occ.push(*f);
        }
    }
    if cols.is_empty() {
        return Err(Error::Arity("no orbitals to orthogonalize".into()));
    }
    let p = cols.len();
    let y = DMatrix::from_fn(n, p, |i, j| cols[j].coeffs()[i]);
    let rr = rayleigh_ritz(&y, a, m)?;
    if rr.rank < p {
        log::warn!("merged post-processing dropped {} dependent orbital(s)", p - rr.rank);
    }
    let x = &y * &rr.c;
    occ.sort_by(|u, v| v.total_cmp(u));
    occ.truncate(rr.rank);
    let orthogonality = m_orthogonality(m, &x);
    let group = EigenGroup {
        index: 0,
        space: space.clone(),
        orbitals: columns_to_fields(space, &x)?,
        eigenvalues: rr.values,
        occupations: occ,
    };
    Ok(MergedResult { group, dropped: p - rr.rank, orthogonality })
}

/// `max |X'MX - I|`.
pub fn m_orthogonality(m: &SparseMatrix, x: &DMatrix<f64>) -> f64 {
    let mx: Vec<Vec<f64>> = (0..x.ncols()).map(|j| m.mul(x.column(j).as_slice())).collect();
    let mut worst: f64 = 0.0;
    for i in 0..x.ncols() {
        for j in 0..x.ncols() {
            let g: f64 = x.column(i).iter().zip(&mx[j]).map(|(u, v)| u * v).sum();
            let d = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g - d).abs());
        }
    }
    worst
}
