//! The `run` subcommand: outer loop plus artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use eigsplit_core::fespace::Field;
use eigsplit_core::hgt::{Hgt, MeshView};
use eigsplit_core::io::{write_checkpoint, write_vtk};
use eigsplit_core::ks::{electron_count, OccupationRule};
use eigsplit_core::scf::{write_iteration_csv, Report, Scf};
use eigsplit_core::split::{make_plan, merge_meshes, splitting_factor, SplitPlan, SplitStrategy};

use crate::config::RunConfig;

pub const SUMMARY_FILE: &str = "summary.txt";
pub const ITERATIONS_FILE: &str = "iterations.csv";
pub const ROUNDS_FILE: &str = "rounds.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

pub struct Outcome {
    pub report: Report,
    pub splitting_factor: f64,
    pub summary: String,
    pub out_dir: PathBuf,
}

/// Coarse bare eigenvalues on the initial mesh, used to place the cuts of
/// the eigenvalue-gap strategy.
fn gap_hints(cfg: &RunConfig, tree: &Hgt, view: &MeshView) -> Result<Vec<f64>> {
    let n_occ = OccupationRule::new(electron_count(&cfg.atoms)).n_occ;
    let plan = SplitPlan { strategy: SplitStrategy::CoreValence, group_sizes: vec![n_occ], n_occ };
    let probe = Scf::new(tree.clone(), view, cfg.atoms.clone(), plan, cfg.scf.clone())?;
    Ok(probe.eigenvalues())
}

pub fn plan_label(plan: &SplitPlan) -> String {
    let sizes: Vec<String> = plan.group_sizes.iter().map(|s| s.to_string()).collect();
    format!("({})", sizes.join(","))
}

/// Execute the outer loop and write every artifact into the output directory.
pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let tree = Hgt::cube(cfg.box_half_width, cfg.grid)?;
    let view = tree.root_view();
    let hints = match cfg.strategy {
        SplitStrategy::EigenvalueGap { .. } => Some(gap_hints(cfg, &tree, &view)?),
        _ => None,
    };
    let plan = make_plan(&cfg.atoms, cfg.strategy, hints.as_deref())?;
    log::info!("atoms {}; plan {} ({})", cfg.atoms_label(), plan_label(&plan), plan.strategy.name());

    let mut scf = Scf::new(tree, &view, cfg.atoms.clone(), plan, cfg.scf.clone())?;
    let report = scf.outer_loop()?;

    let sf = match &report.merged {
        Some(m) => m.splitting_factor,
        None => {
            let views: Vec<MeshView> = (0..scf.n_groups()).map(|k| scf.group_view(k).clone()).collect();
            let refs: Vec<&MeshView> = views.iter().collect();
            let merged = merge_meshes(&mut scf.tree, &refs)?;
            splitting_factor(&refs, &merged)?
        }
    };

    let dir = &cfg.out_dir;
    let csv = create(dir, ITERATIONS_FILE)?;
    write_iteration_csv(&scf.log, csv).context("writing the iteration log")?;
    write_rounds(&report, create(dir, ROUNDS_FILE)?).context("writing the round log")?;
    if cfg.write_vtk {
        write_fields(&scf, dir)?;
    }
    if cfg.write_checkpoint {
        write_checkpoint(&scf.checkpoint(), create(dir, CHECKPOINT_FILE)?)?;
    }
    let summary = summary_text(cfg, &report, sf, &scf);
    fs::write(dir.join(SUMMARY_FILE), &summary).context("writing the summary")?;
    Ok(Outcome { report, splitting_factor: sf, summary, out_dir: dir.clone() })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_rounds<W: Write>(report: &Report, mut w: W) -> std::io::Result<()> {
    writeln!(w, "round,scf_iterations,scf_converged,delta_rho,e_tot,e_band,e_hartree,e_xc_correction,total_dofs")?;
    for r in &report.rounds {
        let e = &r.energy;
        writeln!(
            w,
            "{},{},{},{:.12e},{:.12},{:.12},{:.12},{:.12},{}",
            r.round,
            r.scf_iterations,
            r.scf_converged,
            r.delta_rho,
            e.total,
            e.band,
            e.hartree,
            e.xc_correction,
            r.total_dofs()
        )?;
    }
    w.flush()
}

/// One file per group mesh with its orbitals and density, plus the Hartree
/// mesh with the density and potential.
fn write_fields(scf: &Scf, dir: &Path) -> Result<()> {
    for k in 0..scf.n_groups() {
        let g = &scf.groups[k];
        let names: Vec<String> = (0..g.orbitals.len()).map(|j| format!("psi_{}", j + 1)).collect();
        let mut point: Vec<(&str, &Field)> = names.iter().map(String::as_str).zip(&g.orbitals).collect();
        point.push(("rho", &scf.state.densities[k]));
        let f = create(dir, &format!("group_{}.vtk", k + 1))?;
        write_vtk(f, scf.group_space(k), &point, &[])?;
    }
    let mut point: Vec<(&str, &Field)> = vec![("rho", &scf.state.rho_h)];
    if let Some(phi) = &scf.state.phi {
        point.push(("phi", phi));
    }
    write_vtk(create(dir, "hartree.vtk")?, scf.hartree_space(), &point, &[])?;
    Ok(())
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.10}")).collect::<Vec<_>>().join(" ")
}

pub fn summary_text(cfg: &RunConfig, report: &Report, sf: f64, scf: &Scf) -> String {
    let mut s = String::new();
    let mut line = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
    line("atoms", cfg.atoms_label());
    line("converged", report.converged.to_string());
    line("strategy", report.plan.strategy.name().into());
    line("plan", plan_label(&report.plan));
    line("rounds", report.rounds.len().to_string());
    line("E_tot", format!("{:.10}", report.energy.total));
    line("E_band", format!("{:.10}", report.energy.band));
    line("E_hartree", format!("{:.10}", report.energy.hartree));
    line("E_xc_correction", format!("{:.10}", report.energy.xc_correction));
    for (i, e) in report.eigenvalues.iter().enumerate() {
        line(&format!("eps_{}", i + 1), format!("{e:.10}"));
    }
    line("gap", report.gap.map_or("n/a".into(), |g| format!("{g:.10}")));
    line("splitting_factor", format!("{sf:.6}"));
    for (k, d) in scf.dofs().iter().enumerate() {
        let name = if k + 1 == scf.dofs().len() { "dofs_hartree".to_string() } else { format!("dofs_{}", k + 1) };
        line(&name, d.to_string());
    }
    if let Some(m) = &report.merged {
        line("merged_dofs", m.dofs.to_string());
        line("merged_eigenvalues", list(&m.eigenvalues));
        line("merged_gap", m.gap.map_or("n/a".into(), |g| format!("{g:.10}")));
        line("merged_orthogonality", format!("{:.3e}", m.orthogonality));
        line("merged_dropped", m.dropped.to_string());
    }
    s
}
