use eigsplit_core::adapt::MarkStrategy;
use eigsplit_core::hgt::Hgt;
use eigsplit_core::io::{read_checkpoint, write_checkpoint};
use eigsplit_core::ks::{compute_density, AtomSpec, HamiltonianMode};
use eigsplit_core::scf::{write_iteration_csv, Scf, ScfOptions};
use eigsplit_core::split::{make_plan, SplitStrategy};

fn solver(atoms: Vec<AtomSpec>, half: f64, n: usize, opts: ScfOptions) -> Scf {
    let tree = Hgt::cube(half, n).unwrap();
    let view = tree.root_view();
    let plan = make_plan(&atoms, SplitStrategy::CoreValence, None).unwrap();
    Scf::new(tree, &view, atoms, plan, opts).unwrap()
}

fn lithium(opts: ScfOptions) -> Scf {
    solver(vec![AtomSpec::new(3.0, [0.0; 3])], 8.0, 4, opts)
}

#[test]
fn hydrogen_single_group_converges_within_30_iterations() {
    let mut scf = solver(vec![AtomSpec::new(1.0, [0.0; 3])], 8.0, 6, ScfOptions::default());
    assert_eq!(scf.n_groups(), 1);
    let mut reached = None;
    for it in 1..=30 {
        if scf.scf_iteration().unwrap() < 1e-6 {
            reached = Some(it);
            break;
        }
    }
    let hist = &scf.state.delta_history;
    assert!(reached.is_some(), "delta_rho history {hist:?}");
    assert!(hist.last().unwrap() < &hist[0]);
}

#[test]
fn two_groups_update_the_density_twice_per_iteration() {
    let mut scf = lithium(ScfOptions::default());
    assert_eq!(scf.plan.group_sizes, vec![1, 1]);
    for i in 1..=4 {
        let before = scf.state.density_updates;
        scf.scf_iteration().unwrap();
        assert_eq!(scf.state.density_updates - before, 2);
        assert_eq!(scf.state.iteration, i);
    }
    assert!(scf.state.densities.iter().all(|d| d.coeffs().iter().all(|&x| x >= 0.0)));
}

#[test]
fn constructed_fixed_point_gives_zero_density_change() {
    let mut scf = lithium(ScfOptions::default());
    scf.scf_iteration().unwrap();
    // densities equal to what the current orbitals produce
    for k in 0..scf.n_groups() {
        scf.state.densities[k] = compute_density(&scf.tree, &scf.groups, scf.group_space(k)).unwrap();
    }
    scf.state.rho_h = compute_density(&scf.tree, &scf.groups, scf.hartree_space()).unwrap();
    let before: Vec<Vec<f64>> = scf.state.densities.iter().map(|d| d.coeffs().to_vec()).collect();
    let mut delta = 0.0;
    for s in 0..scf.n_groups() {
        delta += scf.density_update(s).unwrap();
    }
    assert!(delta <= 1e-13, "delta {delta:e}");
    for (b, d) in before.iter().zip(&scf.state.densities) {
        for (x, y) in b.iter().zip(d.coeffs()) {
            assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
        }
    }
}

#[test]
fn infinite_energy_tolerance_runs_one_phase() {
    let opts = ScfOptions { tol_energy: f64::INFINITY, post_process: false, ..Default::default() };
    let mut scf = lithium(opts);
    let dofs = scf.dofs();
    let rep = scf.outer_loop().unwrap();
    assert_eq!(rep.rounds.len(), 1);
    assert_eq!(scf.dofs(), dofs);
}

#[test]
fn checkpoint_restores_the_iteration() {
    let mut scf = lithium(ScfOptions::default());
    scf.scf_iteration().unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&scf.checkpoint(), &mut buf).unwrap();
    let mut back = Scf::restore(read_checkpoint(&buf[..]).unwrap()).unwrap();
    assert_eq!(back.eigenvalues(), scf.eigenvalues());
    assert_eq!(back.dofs(), scf.dofs());
    let (a, b) = (scf.scf_iteration().unwrap(), back.scf_iteration().unwrap());
    assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300), "{a} vs {b}");
    for (x, y) in scf.eigenvalues().iter().zip(back.eigenvalues()) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn lithium_hydride_energy_decreases_under_adaptation() {
    let atoms = vec![AtomSpec::new(3.0, [-1.5075, 0.0, 0.0]), AtomSpec::new(1.0, [1.5075, 0.0, 0.0])];
    let opts = ScfOptions {
        marking: MarkStrategy::Maximum { refine: 0.3, coarsen: 0.0 },
        tol_energy: 1e-9,
        max_adapt: 6,
        max_dofs: 12_000,
        ..Default::default()
    };
    let mut scf = solver(atoms, 10.0, 4, opts);
    assert_eq!(scf.plan.group_sizes, vec![1, 1]);
    let rep = scf.outer_loop().unwrap();
    let e: Vec<f64> = rep.rounds.iter().map(|r| r.energy.total).collect();
    let mut run = 0;
    let mut best = 0;
    for w in e.windows(2) {
        run = if w[1] < w[0] { run + 1 } else { 0 };
        best = best.max(run);
    }
    assert!(best >= 3, "energies {e:?}");
    let merged = rep.merged.unwrap();
    assert!(merged.orthogonality <= 1e-10);
    assert!(merged.splitting_factor >= 0.5 - 1e-12 && merged.splitting_factor <= 1.0 + 1e-12);
    let mut csv = Vec::new();
    write_iteration_csv(&scf.log, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), scf.log.len() + 1);
    assert!(text.starts_with("round,iteration,density_updates,delta_rho,e_tot,eps_1,eps_2,dofs_1,dofs_2,dofs_h"));
}

#[test]
fn bare_mode_ignores_the_density() {
    let opts = ScfOptions { mode: HamiltonianMode::Bare, ..Default::default() };
    let mut scf = solver(vec![AtomSpec::new(1.0, [0.0; 3])], 8.0, 4, opts);
    let e0 = scf.eigenvalues()[0];
    scf.scf_iteration().unwrap();
    assert!((scf.eigenvalues()[0] - e0).abs() < 1e-8);
    assert!(scf.state.phi.is_none());
}
