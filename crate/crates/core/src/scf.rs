//! Self-consistent field driver: one eigensolve per group per iteration,
//! each followed by a density update on every mesh, wrapped in an outer
//! mesh-adaptation loop.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::adapt::{self, MarkStrategy, Normalization, PotentialContext};
use crate::error::{contract, Error, Result};
use crate::fespace::{FeSpace, Field};
use crate::hartree::{PoissonOptions, PoissonSystem};
use crate::hgt::{Hgt, MeshView};
use crate::ks::{self, AtomSpec, EigenGroup, EnergyTerms, HamiltonianMode, KsSystem, OccupationRule};
use crate::lobpcg::{self, EigenRequest, KineticPreconditioner};
use crate::sparse::SparseMatrix;
use crate::split::{self, MergedResult, SplitPlan};

/// Default mixing factor.
pub const DEFAULT_ALPHA: f64 = 0.618;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScfOptions {
    /// Weight of the previous density in `alpha * old + (1 - alpha) * new`.
    pub alpha: f64,
    /// Stop the SCF iteration once the density change drops below this.
    pub tol_density: f64,
    /// Stop adapting once the energy changes by less than this between rounds.
    pub tol_energy: f64,
    pub max_scf: usize,
    pub max_adapt: usize,
    /// Adaptation stops before any mesh would exceed this many dofs.
    pub max_dofs: usize,
    pub eig_tol: f64,
    pub eig_maxit: usize,
    pub precond_iters: usize,
    pub poisson: PoissonOptions,
    pub mode: HamiltonianMode,
    pub marking: MarkStrategy,
    pub normalization: Normalization,
    /// Run the merged-space orthogonalization at the end.
    pub post_process: bool,
    pub seed: u64,
    /// Random instead of hydrogenic starting orbitals.
    pub random_init: bool,
}

impl Default for ScfOptions {
    fn default() -> Self {
        ScfOptions {
            alpha: DEFAULT_ALPHA,
            tol_density: 1e-6,
            tol_energy: 1e-5,
            max_scf: 60,
            max_adapt: 8,
            max_dofs: 300_000,
            eig_tol: 1e-9,
            eig_maxit: 300,
            precond_iters: 10,
            poisson: PoissonOptions::default(),
            mode: HamiltonianMode::Lda,
            marking: MarkStrategy::default(),
            normalization: Normalization::Max,
            post_process: true,
            seed: 0,
            random_init: false,
        }
    }
}

impl ScfOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config { field: field.into(), msg: msg.into() });
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha", "must lie in (0, 1)");
        }
        if !(self.tol_density > 0.0) || !(self.tol_energy > 0.0) || !(self.eig_tol > 0.0) {
            return bad("tolerance", "tolerances must be positive");
        }
        if self.max_scf == 0 || self.eig_maxit == 0 {
            return bad("iterations", "iteration limits must be positive");
        }
        Ok(())
    }
}

/// `alpha * old + (1 - alpha) * new`, dof by dof.
pub fn mix(alpha: f64, old: &Field, new: &Field) -> Result<Field> {
    if !Arc::ptr_eq(old.space(), new.space()) {
        return contract("mixing densities from different spaces");
    }
    let c = old.coeffs().iter().zip(new.coeffs()).map(|(o, n)| alpha * o + (1.0 - alpha) * n).collect();
    Field::new(old.space().clone(), c)
}

/// `sqrt(v' M v)`.
pub fn m_norm(mass: &SparseMatrix, v: &[f64]) -> f64 {
    mass.inner(v, v).max(0.0).sqrt()
}

/// Densities and bookkeeping carried between SCF iterations.
#[derive(Clone, Debug)]
pub struct ScfState {
    /// Mixed density on each group mesh.
    pub densities: Vec<Field>,
    /// Mixed density on the Hartree mesh.
    pub rho_h: Field,
    pub phi: Option<Field>,
    pub alpha: f64,
    pub iteration: usize,
    pub density_updates: usize,
    pub delta_history: Vec<f64>,
    pub energy_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub round: usize,
    pub iteration: usize,
    pub density_updates: usize,
    pub delta_rho: f64,
    pub energy: f64,
    pub eigenvalues: Vec<f64>,
    /// Dofs of the group meshes followed by the Hartree mesh.
    pub dofs: Vec<usize>,
}

pub fn write_iteration_csv<W: Write>(records: &[IterationRecord], mut w: W) -> std::io::Result<()> {
    let n_eig = records.iter().map(|r| r.eigenvalues.len()).max().unwrap_or(0);
    let n_mesh = records.iter().map(|r| r.dofs.len()).max().unwrap_or(0);
    write!(w, "round,iteration,density_updates,delta_rho,e_tot")?;
    for i in 1..=n_eig {
        write!(w, ",eps_{i}")?;
    }
    for i in 1..n_mesh {
        write!(w, ",dofs_{i}")?;
    }
    if n_mesh > 0 {
        write!(w, ",dofs_h")?;
    }
    writeln!(w)?;
    for r in records {
        write!(w, "{},{},{},{:.12e},{:.12}", r.round, r.iteration, r.density_updates, r.delta_rho, r.energy)?;
        for e in &r.eigenvalues {
            write!(w, ",{e:.12}")?;
        }
        for d in &r.dofs {
            write!(w, ",{d}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub scf_iterations: usize,
    pub scf_converged: bool,
    pub delta_rho: f64,
    pub energy: EnergyTerms,
    pub eigenvalues: Vec<f64>,
    pub dofs: Vec<usize>,
    pub hartree_dofs: usize,
}

impl RoundRecord {
    pub fn total_dofs(&self) -> usize {
        self.dofs.iter().sum::<usize>() + self.hartree_dofs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergedSummary {
    pub eigenvalues: Vec<f64>,
    pub orthogonality: f64,
    pub dropped: usize,
    pub dofs: usize,
    pub splitting_factor: f64,
    pub gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Energy criterion met within the adaptation budget.
    pub converged: bool,
    pub plan: SplitPlan,
    pub energy: EnergyTerms,
    pub eigenvalues: Vec<f64>,
    pub gap: Option<f64>,
    pub rounds: Vec<RoundRecord>,
    pub merged: Option<MergedSummary>,
}

/// Everything attached to one mesh: view, space and the cached matrices on
/// the interior (non-Dirichlet) dofs.
struct KsSlot {
    sys: KsSystem,
    interior: Vec<usize>,
    mass_i: SparseMatrix,
    kinetic_i: SparseMatrix,
}

impl KsSlot {
    fn new(space: Arc<FeSpace>) -> Result<Self> {
        let sys = KsSystem::new(space)?;
        let interior: Vec<usize> =
            sys.space().boundary().iter().enumerate().filter(|(_, &b)| !b).map(|(i, _)| i).collect();
        let mass_i = sys.mass().submatrix(&interior);
        let kinetic_i = sys.kinetic().submatrix(&interior);
        Ok(KsSlot { sys, interior, mass_i, kinetic_i })
    }

    fn space(&self) -> &Arc<FeSpace> {
        self.sys.space()
    }

    fn restrict(&self, v: &[f64]) -> Vec<f64> {
        self.interior.iter().map(|&i| v[i]).collect()
    }

    fn extend(&self, v: impl Iterator<Item = f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.space().n_dofs()];
        for (&i, x) in self.interior.iter().zip(v) {
            out[i] = x;
        }
        out
    }
}

/// Multi-mesh SCF solver for one molecule.
pub struct Scf {
    pub tree: Hgt,
    pub atoms: Vec<AtomSpec>,
    pub plan: SplitPlan,
    pub opts: ScfOptions,
    slots: Vec<Arc<KsSlot>>,
    hartree: PoissonSystem,
    pub groups: Vec<EigenGroup>,
    pub state: ScfState,
    pub log: Vec<IterationRecord>,
    round: usize,
}

impl Scf {
    /// Every mesh starts as `initial`. Starting orbitals come from the bare
    /// Hamiltonian so that the first density is meaningful.
    pub fn new(tree: Hgt, initial: &MeshView, atoms: Vec<AtomSpec>, plan: SplitPlan, opts: ScfOptions) -> Result<Self> {
        opts.validate()?;
        tree.validate_view(initial)?;
        if plan.group_sizes.is_empty() || plan.group_sizes.contains(&0) {
            return contract("split plan needs nonempty groups");
        }
        let space = Arc::new(FeSpace::build(&tree, initial)?);
        let occ = OccupationRule::new(ks::electron_count(&atoms)).occupations(plan.total());
        let ranges = plan.ranges();
        let mut slots = Vec::with_capacity(plan.n_groups());
        let mut groups = Vec::with_capacity(plan.n_groups());
        let shared = Arc::new(KsSlot::new(space.clone())?);
        for (k, r) in ranges.iter().enumerate() {
            slots.push(shared.clone());
            groups.push(EigenGroup {
                index: k,
                space: space.clone(),
                orbitals: Vec::new(),
                eigenvalues: Vec::new(),
                occupations: occ[r.clone()].to_vec(),
            });
        }
        let hartree = PoissonSystem::new(space.clone())?;
        let zero = Field::zeros(space.clone());
        let state = ScfState {
            densities: vec![zero.clone(); plan.n_groups()],
            rho_h: zero,
            phi: None,
            alpha: opts.alpha,
            iteration: 0,
            density_updates: 0,
            delta_history: Vec::new(),
            energy_history: Vec::new(),
        };
        let mut scf = Scf { tree, atoms, plan, opts, slots, hartree, groups, state, log: Vec::new(), round: 0 };
        for s in 0..scf.groups.len() {
            scf.solve_group(s, HamiltonianMode::Bare)?;
        }
        for k in 0..scf.groups.len() {
            scf.state.densities[k] = ks::compute_density(&scf.tree, &scf.groups, scf.slots[k].space())?;
        }
        scf.state.rho_h = ks::compute_density(&scf.tree, &scf.groups, scf.hartree.space())?;
        Ok(scf)
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_view(&self, k: usize) -> &MeshView {
        self.slots[k].space().view()
    }

    pub fn group_space(&self, k: usize) -> &Arc<FeSpace> {
        self.slots[k].space()
    }

    pub fn group_mass(&self, k: usize) -> &SparseMatrix {
        self.slots[k].sys.mass()
    }

    pub fn hartree_space(&self) -> &Arc<FeSpace> {
        self.hartree.space()
    }

    pub fn dofs(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.slots.iter().map(|s| s.space().n_dofs()).collect();
        d.push(self.hartree.space().n_dofs());
        d
    }

    /// Eigenvalues of all groups in group order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        self.groups.iter().flat_map(|g| g.eigenvalues.iter().copied()).collect()
    }

    pub fn energy(&self) -> Result<EnergyTerms> {
        ks::total_energy(&self.tree, &self.groups, self.state.phi.as_ref(), self.opts.mode)
    }

    fn update_hartree(&mut self) -> Result<()> {
        if self.opts.mode == HamiltonianMode::Lda {
            let sol = self.hartree.solve(&self.tree, &self.state.rho_h, &self.opts.poisson)?;
            self.state.phi = Some(sol.phi);
        }
        Ok(())
    }

    /// Solve group `s` with the orbitals of all earlier groups, interpolated
    /// onto its mesh, locked in front of the block.
    fn solve_group(&mut self, s: usize, mode: HamiltonianMode) -> Result<()> {
        let slot = &self.slots[s];
        let space = slot.space().clone();
        let a = slot.sys.hamiltonian(
            &self.tree,
            &self.atoms,
            self.state.phi.as_ref(),
            Some(&self.state.densities[s]),
            mode,
        )?;
        let a_i = a.submatrix(&slot.interior);
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for g in &self.groups[..s] {
            for psi in &g.orbitals {
                cols.push(slot.restrict(psi.interpolate(&self.tree, &space)?.coeffs()));
            }
        }
        let n_prefix = cols.len();
        let p = self.plan.group_sizes[s];
        if self.groups[s].orbitals.len() == p {
            for psi in &self.groups[s].orbitals {
                cols.push(slot.restrict(psi.coeffs()));
            }
        } else {
            let start = self.plan.ranges()[s].start;
            let guess = ks::initial_guess(&space, &self.atoms, start + p, self.opts.seed, self.opts.random_init);
            for j in start..start + p {
                cols.push(slot.restrict(guess.column(j).as_slice()));
            }
        }
        let n = slot.interior.len();
        if cols.len() > n {
            return contract(format!("{} orbitals requested on a mesh with {n} interior dofs", cols.len()));
        }
        let x0 = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
        let prec = KineticPreconditioner::new(&slot.kinetic_i, &slot.mass_i, self.opts.precond_iters);
        let mut req = EigenRequest::new(&a_i, &slot.mass_i, x0);
        req.n_prefix_locked = n_prefix;
        req.tol = self.opts.eig_tol;
        req.maxit = self.opts.eig_maxit;
        req.precond = Some(&prec);
        req.seed = self.opts.seed.wrapping_add(s as u64);
        let res = lobpcg::solve(&req).map_err(|e| Error::Eigen {
            iteration: self.state.iteration,
            group: s,
            source: Box::new(e),
        })?;
        if !res.all_converged() {
            log::warn!(
                "group {s}: {} of {p} eigenpairs unconverged after {} LOBPCG iterations",
                res.converged[n_prefix..].iter().filter(|c| !**c).count(),
                res.iterations
            );
        }
        let orbitals = (n_prefix..n_prefix + p)
            .map(|j| Field::new(space.clone(), slot.extend(res.vectors.column(j).iter().copied())))
            .collect::<Result<Vec<_>>>()?;
        let g = &mut self.groups[s];
        g.space = space;
        g.orbitals = orbitals;
        g.eigenvalues = res.eigenvalues[n_prefix..].to_vec();
        Ok(())
    }

    /// Rebuild the density from the current orbitals on every mesh and mix.
    /// Returns the M-norm of the change on the mesh of group `owner`.
    pub fn density_update(&mut self, owner: usize) -> Result<f64> {
        if owner >= self.groups.len() {
            return contract("density update for a nonexistent group");
        }
        let alpha = self.state.alpha;
        let mut delta = 0.0;
        for k in 0..self.groups.len() {
            let new = ks::compute_density(&self.tree, &self.groups, self.slots[k].space())?;
            let mixed = mix(alpha, &self.state.densities[k], &new)?;
            if k == owner {
                let diff: Vec<f64> =
                    mixed.coeffs().iter().zip(self.state.densities[k].coeffs()).map(|(a, b)| a - b).collect();
                delta = m_norm(self.slots[k].sys.mass(), &diff);
            }
            self.state.densities[k] = mixed;
        }
        let new = ks::compute_density(&self.tree, &self.groups, self.hartree.space())?;
        self.state.rho_h = mix(alpha, &self.state.rho_h, &new)?;
        self.state.density_updates += 1;
        Ok(delta)
    }

    /// One SCF iteration: for each group in order, refresh the Hartree
    /// potential, solve the group, update the densities. Returns the summed
    /// density change.
    pub fn scf_iteration(&mut self) -> Result<f64> {
        let mut delta = 0.0;
        for s in 0..self.groups.len() {
            self.update_hartree()?;
            self.solve_group(s, self.opts.mode)?;
            delta += self.density_update(s)?;
        }
        self.state.iteration += 1;
        let energy = self.energy()?.total;
        self.state.delta_history.push(delta);
        self.state.energy_history.push(energy);
        self.log.push(IterationRecord {
            round: self.round,
            iteration: self.state.iteration,
            density_updates: self.state.density_updates,
            delta_rho: delta,
            energy,
            eigenvalues: self.eigenvalues(),
            dofs: self.dofs(),
        });
        log::debug!("scf {}: delta_rho {delta:.3e}, E {energy:.10}", self.state.iteration);
        Ok(delta)
    }

    /// Iterate until the density change drops below the tolerance. Returns
    /// (converged, iterations, last change).
    pub fn run_scf(&mut self) -> Result<(bool, usize, f64)> {
        let mut last = f64::INFINITY;
        for it in 1..=self.opts.max_scf {
            last = self.scf_iteration()?;
            if last < self.opts.tol_density {
                return Ok((true, it, last));
            }
        }
        Ok((false, self.opts.max_scf, last))
    }

    /// Adapt every mesh with its own indicator and move all fields over.
    /// Returns false (and leaves everything untouched) when nothing would
    /// change or a mesh would exceed the dof cap.
    pub fn adapt(&mut self) -> Result<bool> {
        let lda = self.opts.mode == HamiltonianMode::Lda;
        let mut marks = Vec::with_capacity(self.groups.len());
        for (k, g) in self.groups.iter().enumerate() {
            let ctx = PotentialContext {
                atoms: &self.atoms,
                phi: self.state.phi.as_ref(),
                rho: Some(&self.state.densities[k]),
                mode: self.opts.mode,
            };
            let eta =
                adapt::indicator_ks_group(&self.tree, &g.orbitals, &g.eigenvalues, &ctx, self.opts.normalization)?;
            marks.push(adapt::mark(&self.tree, self.group_view(k), &eta, self.opts.marking)?);
        }
        let hartree_marks = match (&self.state.phi, lda) {
            (Some(phi), true) => {
                let eta = adapt::indicator_hartree(&self.tree, phi, &self.state.rho_h)?;
                Some(adapt::mark(&self.tree, self.hartree.space().view(), &eta, self.opts.marking)?)
            }
            _ => None,
        };
        let changed = |m: &adapt::Marks| !m.refine.is_empty() || !m.coarsen.is_empty();
        if !marks.iter().any(changed) && !hartree_marks.as_ref().is_some_and(changed) {
            return Ok(false);
        }
        // Group meshes that started out shared stay shared when their marks agree.
        let mut new_spaces: Vec<Arc<FeSpace>> = Vec::with_capacity(self.groups.len());
        for k in 0..self.groups.len() {
            let old = self.slots[k].space().clone();
            let reuse = (0..k).find(|&j| Arc::ptr_eq(self.slots[j].space(), &old) && marks[j] == marks[k]);
            let space = match reuse {
                Some(j) => new_spaces[j].clone(),
                None if !changed(&marks[k]) => old,
                None => {
                    let view = adapt::adapt_view(&mut self.tree, old.view(), &marks[k])?;
                    Arc::new(FeSpace::build(&self.tree, &view)?)
                }
            };
            new_spaces.push(space);
        }
        let h_old = self.hartree.space().clone();
        let h_space = match &hartree_marks {
            Some(m) if changed(m) => {
                let view = adapt::adapt_view(&mut self.tree, h_old.view(), m)?;
                Arc::new(FeSpace::build(&self.tree, &view)?)
            }
            _ => h_old.clone(),
        };
        let too_big = new_spaces.iter().chain(std::iter::once(&h_space)).any(|s| s.n_dofs() > self.opts.max_dofs);
        if too_big {
            log::info!("adaptation stopped: a mesh would exceed {} dofs", self.opts.max_dofs);
            return Ok(false);
        }
        for k in 0..self.groups.len() {
            let space = &new_spaces[k];
            if Arc::ptr_eq(space, self.slots[k].space()) {
                continue;
            }
            let g = &mut self.groups[k];
            g.orbitals = g.orbitals.iter().map(|f| f.transfer_after_adapt(&self.tree, space)).collect::<Result<_>>()?;
            g.space = space.clone();
            self.state.densities[k] = self.state.densities[k].transfer_after_adapt(&self.tree, space)?;
            let reuse = (0..k).find(|&j| Arc::ptr_eq(&new_spaces[j], space));
            self.slots[k] = match reuse {
                Some(j) => self.slots[j].clone(),
                None => Arc::new(KsSlot::new(space.clone())?),
            };
        }
        if !Arc::ptr_eq(&h_space, &h_old) {
            self.state.rho_h = self.state.rho_h.transfer_after_adapt(&self.tree, &h_space)?;
            if let Some(phi) = &self.state.phi {
                self.state.phi = Some(phi.transfer_after_adapt(&self.tree, &h_space)?);
            }
            self.hartree = PoissonSystem::new(h_space)?;
        }
        self.round += 1;
        Ok(true)
    }

    /// Interpolate all orbitals onto the merged KS mesh and rotate them by
    /// the small projected eigenproblem.
    pub fn post_process(&mut self) -> Result<(MergedResult, f64)> {
        let views: Vec<MeshView> = (0..self.groups.len()).map(|k| self.group_view(k).clone()).collect();
        let refs: Vec<&MeshView> = views.iter().collect();
        let merged = split::merge_meshes(&mut self.tree, &refs)?;
        let sf = split::splitting_factor(&refs, &merged)?;
        let space = Arc::new(FeSpace::build(&self.tree, &merged)?);
        let sys = KsSystem::new(space.clone())?;
        let rho = ks::compute_density(&self.tree, &self.groups, &space)?;
        let a = sys.hamiltonian(&self.tree, &self.atoms, self.state.phi.as_ref(), Some(&rho), self.opts.mode)?;
        let res = split::orthogonalize_merged(&self.tree, &self.groups, &space, &a, sys.mass())?;
        Ok((res, sf))
    }

    /// SCF phases alternating with mesh adaptation until the energy settles.
    pub fn outer_loop(&mut self) -> Result<Report> {
        let mut rounds: Vec<RoundRecord> = Vec::new();
        let mut converged = false;
        loop {
            let (scf_converged, iterations, delta) = self.run_scf()?;
            if !scf_converged {
                log::warn!("SCF phase {} stopped at delta_rho {delta:.3e}", self.round);
            }
            let energy = self.energy()?;
            let dofs = self.dofs();
            rounds.push(RoundRecord {
                round: self.round,
                scf_iterations: iterations,
                scf_converged,
                delta_rho: delta,
                energy,
                eigenvalues: self.eigenvalues(),
                hartree_dofs: dofs[dofs.len() - 1],
                dofs: dofs[..dofs.len() - 1].to_vec(),
            });
            log::info!("round {}: E = {:.10}, dofs {:?}", self.round, energy.total, dofs);
            if !self.opts.tol_energy.is_finite() {
                converged = scf_converged;
                break;
            }
            if let [.., prev, last] = rounds.as_slice() {
                if (last.energy.total - prev.energy.total).abs() < self.opts.tol_energy {
                    converged = scf_converged;
                    break;
                }
            }
            if rounds.len() > self.opts.max_adapt || !self.adapt()? {
                break;
            }
        }
        let merged = if self.opts.post_process {
            let (res, sf) = self.post_process()?;
            let n_occ = self.plan.n_occ;
            Some(MergedSummary {
                gap: ks::homo_lumo_gap(&res.group.eigenvalues, n_occ).ok(),
                eigenvalues: res.group.eigenvalues,
                orthogonality: res.orthogonality,
                dropped: res.dropped,
                dofs: res.group.space.n_dofs(),
                splitting_factor: sf,
            })
        } else {
            None
        };
        let eigenvalues = self.eigenvalues();
        Ok(Report {
            converged,
            plan: self.plan.clone(),
            energy: self.energy()?,
            gap: ks::homo_lumo_gap(&eigenvalues, self.plan.n_occ).ok(),
            eigenvalues,
            rounds,
            merged,
        })
    }

    /// Snapshot of the tree, meshes and fields.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            tree: self.tree.clone(),
            atoms: self.atoms.clone(),
            plan: self.plan.clone(),
            opts: self.opts.clone(),
            round: self.round,
            iteration: self.state.iteration,
            density_updates: self.state.density_updates,
            groups: self
                .groups
                .iter()
                .enumerate()
                .map(|(k, g)| GroupSnapshot {
                    view: g.space.view().clone(),
                    orbitals: g.orbitals.iter().map(|f| f.coeffs().to_vec()).collect(),
                    eigenvalues: g.eigenvalues.clone(),
                    occupations: g.occupations.clone(),
                    density: self.state.densities[k].coeffs().to_vec(),
                })
                .collect(),
            hartree_view: self.hartree.space().view().clone(),
            rho_h: self.state.rho_h.coeffs().to_vec(),
            phi: self.state.phi.as_ref().map(|f| f.coeffs().to_vec()),
            delta_history: self.state.delta_history.clone(),
            energy_history: self.state.energy_history.clone(),
        }
    }

    /// Rebuild a solver from a snapshot.
    pub fn restore(mut cp: Checkpoint) -> Result<Self> {
        cp.opts.validate()?;
        cp.tree.reissue_id();
        let tree = cp.tree;
        let mut spaces: Vec<Arc<KsSlot>> = Vec::new();
        let mut slot_for = |view: &mut MeshView, tree: &Hgt| -> Result<Arc<KsSlot>> {
            view.rebind(tree);
            if let Some(s) = spaces.iter().find(|s| s.space().view().same_leaves(view)) {
                return Ok(s.clone());
            }
            let s = Arc::new(KsSlot::new(Arc::new(FeSpace::build(tree, view)?))?);
            spaces.push(s.clone());
            Ok(s)
        };
        let mut slots = Vec::new();
        let mut groups = Vec::new();
        let mut densities = Vec::new();
        for (k, mut g) in cp.groups.into_iter().enumerate() {
            let slot = slot_for(&mut g.view, &tree)?;
            let space = slot.space().clone();
            slots.push(slot);
            densities.push(Field::new(space.clone(), g.density)?);
            groups.push(EigenGroup {
                index: k,
                orbitals: g.orbitals.into_iter().map(|c| Field::new(space.clone(), c)).collect::<Result<_>>()?,
                space,
                eigenvalues: g.eigenvalues,
                occupations: g.occupations,
            });
        }
        if groups.len() != cp.plan.n_groups() {
            return Err(Error::Checkpoint("group count does not match the plan".into()));
        }
        let h_space = slot_for(&mut cp.hartree_view, &tree)?.space().clone();
        let state = ScfState {
            densities,
            rho_h: Field::new(h_space.clone(), cp.rho_h)?,
            phi: cp.phi.map(|c| Field::new(h_space.clone(), c)).transpose()?,
            alpha: cp.opts.alpha,
            iteration: cp.iteration,
            density_updates: cp.density_updates,
            delta_history: cp.delta_history,
            energy_history: cp.energy_history,
        };
        Ok(Scf {
            tree,
            atoms: cp.atoms,
            plan: cp.plan,
            opts: cp.opts,
            slots,
            hartree: PoissonSystem::new(h_space)?,
            groups,
            state,
            log: Vec::new(),
            round: cp.round,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupSnapshot {
    pub view: MeshView,
    pub orbitals: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub occupations: Vec<f64>,
    pub density: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub tree: Hgt,
    pub atoms: Vec<AtomSpec>,
    pub plan: SplitPlan,
    pub opts: ScfOptions,
    pub round: usize,
    pub iteration: usize,
    pub density_updates: usize,
    pub groups: Vec<GroupSnapshot>,
    pub hartree_view: MeshView,
    pub rho_h: Vec<f64>,
    pub phi: Option<Vec<f64>>,
    pub delta_history: Vec<f64>,
    pub energy_history: Vec<f64>,
}
