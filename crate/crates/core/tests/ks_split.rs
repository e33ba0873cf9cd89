use std::sync::Arc;

use eigsplit_core::dense;
use eigsplit_core::fespace::{FeSpace, Field};
use eigsplit_core::geometry;
use eigsplit_core::hgt::{Hgt, MeshView};
use eigsplit_core::ks::{compute_density, integrate, total_energy, AtomSpec, EigenGroup, HamiltonianMode, KsSystem};
use eigsplit_core::lobpcg::{solve, EigenRequest, KineticPreconditioner};
use eigsplit_core::sparse::SparseMatrix;
use eigsplit_core::split::{merge_meshes, orthogonalize_merged, splitting_factor};
use nalgebra::DMatrix;

fn interior(space: &FeSpace) -> Vec<usize> {
    space.boundary().iter().enumerate().filter(|(_, &b)| !b).map(|(i, _)| i).collect()
}

fn to_dense(m: &SparseMatrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.n(), m.n(), |i, j| m.get(i, j))
}

/// Refine cells within `radius` of `c`, `times` times.
fn refine_near(tree: &mut Hgt, mut view: MeshView, c: [f64; 3], radius: f64, times: usize) -> MeshView {
    for _ in 0..times {
        let marked: Vec<_> = view
            .leaves()
            .iter()
            .copied()
            .filter(|&n| geometry::dist(&geometry::centroid(&tree.tet_coords(n)), &c) < radius)
            .collect();
        view = tree.refine(&view, &marked).unwrap();
    }
    view
}

/// Lowest `k` interior eigenpairs with an optional locked prefix.
fn eigen(
    a: &SparseMatrix,
    sys: &KsSystem,
    keep: &[usize],
    prefix: &[Vec<f64>],
    k: usize,
    precond: bool,
) -> (Vec<f64>, Vec<Vec<f64>>, usize) {
    let (ai, mi, li) = (a.submatrix(keep), sys.mass().submatrix(keep), sys.kinetic().submatrix(keep));
    let n = keep.len();
    let np = prefix.len();
    let x0 = DMatrix::from_fn(n, np + k, |i, j| {
        if j < np {
            prefix[j][keep[i]]
        } else {
            let p = sys.space().dof_points()[keep[i]];
            (-geometry::norm(&p)).exp() * (1.0 + 0.3 * (j as f64) * p[0] + 0.1 * p[1] * p[1])
        }
    });
    let prec = KineticPreconditioner::new(&li, &mi, 10);
    let mut req = EigenRequest::new(&ai, &mi, x0);
    req.n_prefix_locked = np;
    req.tol = 1e-9;
    req.maxit = 2000;
    if precond {
        req.precond = Some(&prec);
    }
    let r = solve(&req).unwrap();
    let cols = (np..np + k)
        .map(|j| {
            let mut v = vec![0.0; sys.space().n_dofs()];
            for (i, &d) in keep.iter().enumerate() {
                v[d] = r.vectors[(i, j)];
            }
            v
        })
        .collect();
    (r.eigenvalues[np..].to_vec(), cols, r.iterations)
}

#[test]
fn kinetic_preconditioner_saves_iterations() {
    let mut tree = Hgt::cube(8.0, 4).unwrap();
    let root = tree.root_view();
    let view = refine_near(&mut tree, root, [0.0; 3], 2.5, 3);
    let space = Arc::new(FeSpace::build(&tree, &view).unwrap());
    let sys = KsSystem::new(space.clone()).unwrap();
    let atoms = [AtomSpec::new(1.0, [0.0; 3])];
    let a = sys.hamiltonian(&tree, &atoms, None, None, HamiltonianMode::Bare).unwrap();
    let keep = interior(&space);
    let (e_p, _, it_p) = eigen(&a, &sys, &keep, &[], 2, true);
    let (e_n, _, it_n) = eigen(&a, &sys, &keep, &[], 2, false);
    eprintln!("iterations: preconditioned {it_p}, plain {it_n}");
    assert!(it_p <= it_n);
    for (x, y) in e_p.iter().zip(&e_n) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn hydrogen_ground_state_is_variational_under_refinement() {
    let mut tree = Hgt::cube(8.0, 4).unwrap();
    let atoms = [AtomSpec::new(1.0, [0.0; 3])];
    let mut view = tree.root_view();
    let mut last = f64::INFINITY;
    for _ in 0..3 {
        view = refine_near(&mut tree, view, [0.0; 3], 3.0, 1);
        let space = Arc::new(FeSpace::build(&tree, &view).unwrap());
        let sys = KsSystem::new(space.clone()).unwrap();
        let a = sys.hamiltonian(&tree, &atoms, None, None, HamiltonianMode::Bare).unwrap();
        let (e, _, _) = eigen(&a, &sys, &interior(&space), &[], 1, true);
        assert!(e[0] < last + 1e-9 && e[0] > -0.5, "{} after {last}", e[0]);
        last = e[0];
    }
}

fn bump(c: [f64; 3], w: f64) -> impl Fn(&[f64; 3]) -> f64 {
    move |p| (-geometry::dist(p, &c).powi(2) / w).exp()
}

#[test]
fn density_adds_over_groups_and_hartree_energy_is_mesh_independent() {
    // nested meshes without hanging points, so every field is reproduced
    // exactly on the merged mesh
    let mut tree = Hgt::cube(2.0, 2).unwrap();
    let vh = tree.root_view();
    let v1 = tree.refine_uniform(&vh).unwrap();
    let v2 = tree.refine_uniform(&v1).unwrap();
    let s1 = Arc::new(FeSpace::build(&tree, &v1).unwrap());
    let s2 = Arc::new(FeSpace::build(&tree, &v2).unwrap());
    let sh = Arc::new(FeSpace::build(&tree, &vh).unwrap());
    let psi1 = Field::from_fn(s1.clone(), bump([-1.0, 0.0, 0.0], 0.5));
    let psi2 = Field::from_fn(s2.clone(), bump([1.0, 0.0, 0.0], 0.5));
    let phi = Field::from_fn(sh.clone(), |p| 1.0 / (1.0 + geometry::norm(p)));
    let group = |i, s: &Arc<FeSpace>, f: &Field, e| EigenGroup {
        index: i,
        space: s.clone(),
        orbitals: vec![f.clone()],
        eigenvalues: vec![e],
        occupations: vec![2.0],
    };
    let groups = vec![group(0, &s1, &psi1, -1.0), group(1, &s2, &psi2, -0.3)];
    let merged = merge_meshes(&mut tree, &[&v1, &v2, &vh]).unwrap();
    assert!(merged.same_leaves(&v2));
    let sm = Arc::new(FeSpace::build(&tree, &merged).unwrap());

    let both = compute_density(&tree, &groups, &sm).unwrap();
    let one = compute_density(&tree, &groups[..1], &sm).unwrap();
    let two = compute_density(&tree, &groups[1..], &sm).unwrap();
    for i in 0..sm.n_dofs() {
        assert!((both.coeffs()[i] - one.coeffs()[i] - two.coeffs()[i]).abs() < 1e-15);
    }
    assert!(integrate(&both) > 0.0);

    let cross = total_energy(&tree, &groups, Some(&phi), HamiltonianMode::Lda).unwrap();
    let moved: Vec<EigenGroup> = groups
        .iter()
        .map(|g| EigenGroup {
            space: sm.clone(),
            orbitals: vec![g.orbitals[0].interpolate(&tree, &sm).unwrap()],
            ..g.clone()
        })
        .collect();
    let phi_m = phi.interpolate(&tree, &sm).unwrap();
    let flat = total_energy(&tree, &moved, Some(&phi_m), HamiltonianMode::Lda).unwrap();
    assert!(cross.hartree > 0.0);
    assert!((cross.hartree - flat.hartree).abs() <= 1e-12 * flat.hartree.abs());
    assert!((cross.total - flat.total).abs() <= 1e-10 * flat.total.abs());
}

/// Particle in a box: kinetic operator only, two groups on differently
/// refined meshes, merged and rotated.
struct BoxGroups {
    tree: Hgt,
    groups: Vec<EigenGroup>,
    views: Vec<MeshView>,
}

fn two_groups(tree: Hgt, v1: &MeshView, v2: &MeshView) -> (Hgt, Vec<EigenGroup>) {
    let s1 = Arc::new(FeSpace::build(&tree, v1).unwrap());
    let s2 = Arc::new(FeSpace::build(&tree, v2).unwrap());
    let k1 = KsSystem::new(s1.clone()).unwrap();
    let k2 = KsSystem::new(s2.clone()).unwrap();
    let (e1, c1, _) = eigen(k1.kinetic(), &k1, &interior(&s1), &[], 1, true);
    let f1 = Field::new(s1.clone(), c1[0].clone()).unwrap();
    let prefix = vec![f1.interpolate(&tree, &s2).unwrap().coeffs().to_vec()];
    let (e2, c2, _) = eigen(k2.kinetic(), &k2, &interior(&s2), &prefix, 2, true);
    let g1 = EigenGroup { index: 0, space: s1, orbitals: vec![f1], eigenvalues: e1, occupations: vec![2.0] };
    let g2 = EigenGroup {
        index: 1,
        space: s2.clone(),
        orbitals: c2.into_iter().map(|c| Field::new(s2.clone(), c).unwrap()).collect(),
        eigenvalues: e2,
        occupations: vec![2.0, 0.0],
    };
    (tree, vec![g1, g2])
}

fn box_groups() -> BoxGroups {
    let mut tree = Hgt::cube(1.0, 3).unwrap();
    let root = tree.root_view();
    let v1 = refine_near(&mut tree, root.clone(), [0.0; 3], 0.6, 1);
    let v2 = refine_near(&mut tree, root, [0.5, 0.0, 0.0], 0.6, 1);
    let (tree, groups) = two_groups(tree, &v1, &v2);
    BoxGroups { tree, groups, views: vec![v1, v2] }
}

/// Ritz values after the merge must stay within the merged-space spectrum
/// from below and the pre-merge eigenvalues from above.
fn check_merge(mut tree: Hgt, groups: Vec<EigenGroup>, views: Vec<MeshView>, upper: bool) {
    let refs: Vec<&MeshView> = views.iter().collect();
    let merged = merge_meshes(&mut tree, &refs).unwrap();
    let sf = splitting_factor(&refs, &merged).unwrap();
    assert!((1.0 / refs.len() as f64..=1.0).contains(&sf));
    let sm = Arc::new(FeSpace::build(&tree, &merged).unwrap());
    let km = KsSystem::new(sm.clone()).unwrap();
    let res = orthogonalize_merged(&tree, &groups, &sm, km.kinetic(), km.mass()).unwrap();
    assert_eq!(res.dropped, 0);
    assert!(res.orthogonality <= 1e-10);
    let keep = interior(&sm);
    let (dense_vals, _) =
        dense::gen_sym_eigen(&to_dense(&km.kinetic().submatrix(&keep)), &to_dense(&km.mass().submatrix(&keep)))
            .unwrap();
    let vals = &res.group.eigenvalues;
    assert!(vals.windows(2).all(|w| w[0] <= w[1]));
    assert!(vals[0] >= dense_vals[0] - 1e-8);
    if upper {
        let pre_max = groups.iter().flat_map(|g| g.eigenvalues.iter().copied()).fold(f64::MIN, f64::max);
        assert!(vals[vals.len() - 1] <= pre_max + 1e-10, "{vals:?} vs {pre_max}");
    }
    assert_eq!(res.group.occupations, vec![2.0, 2.0, 0.0]);
}

#[test]
fn merged_rotation_obeys_the_variational_sandwich() {
    let mut tree = Hgt::cube(1.0, 2).unwrap();
    let root = tree.root_view();
    let v1 = tree.refine_uniform(&root).unwrap();
    let v2 = tree.refine_uniform(&v1).unwrap();
    let (tree, groups) = two_groups(tree, &v1, &v2);
    check_merge(tree, groups, vec![v1, v2], true);
}

#[test]
fn locally_refined_groups_merge_to_orthonormal_orbitals() {
    // Closure macros make the group spaces non-nested in the merged space,
    // so only the lower bound is guaranteed here.
    let BoxGroups { tree, groups, views } = box_groups();
    check_merge(tree, groups, views, false);
}

#[test]
fn exact_eigenvectors_pass_through_unchanged() {
    let mut tree = Hgt::cube(1.0, 3).unwrap();
    let root = tree.root_view();
    let view = refine_near(&mut tree, root, [0.2, 0.1, 0.0], 0.5, 1);
    let space = Arc::new(FeSpace::build(&tree, &view).unwrap());
    let sys = KsSystem::new(space.clone()).unwrap();
    let keep = interior(&space);
    let (vals, vecs) =
        dense::gen_sym_eigen(&to_dense(&sys.kinetic().submatrix(&keep)), &to_dense(&sys.mass().submatrix(&keep)))
            .unwrap();
    let field = |j: usize| {
        let mut c = vec![0.0; space.n_dofs()];
        for (i, &d) in keep.iter().enumerate() {
            c[d] = vecs[(i, j)];
        }
        Field::new(space.clone(), c).unwrap()
    };
    let g = |i: usize, js: &[usize]| EigenGroup {
        index: i,
        space: space.clone(),
        orbitals: js.iter().map(|&j| field(j)).collect(),
        eigenvalues: js.iter().map(|&j| vals[j]).collect(),
        occupations: vec![2.0; js.len()],
    };
    let groups = vec![g(0, &[0]), g(1, &[1, 2])];
    let res = orthogonalize_merged(&tree, &groups, &space, sys.kinetic(), sys.mass()).unwrap();
    for j in 0..3 {
        assert!((res.group.eigenvalues[j] - vals[j]).abs() <= 1e-10 * vals[j].abs());
    }
    // first level is simple: the orbital is reproduced up to sign
    let a = res.group.orbitals[0].coeffs();
    let b = groups[0].orbitals[0].coeffs();
    let s = if a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
    assert!(a.iter().zip(b).all(|(x, y)| (x - s * y).abs() < 1e-8));
}

#[test]
fn injected_overlap_is_removed() {
    let BoxGroups { mut tree, mut groups, views } = box_groups();
    // mix a tenth of the first orbital into the second group's first orbital
    let s2 = groups[1].space.clone();
    let p1 = groups[0].orbitals[0].interpolate(&tree, &s2).unwrap();
    let old = groups[1].orbitals[0].coeffs().to_vec();
    let k2 = KsSystem::new(s2.clone()).unwrap();
    let ov = k2.mass().inner(&old, p1.coeffs());
    let mut c: Vec<f64> = old.iter().zip(p1.coeffs()).map(|(a, b)| a + (0.1 - ov) * b).collect();
    let nrm = k2.mass().inner(&c, &c).sqrt();
    c.iter_mut().for_each(|x| *x /= nrm);
    let injected = k2.mass().inner(&c, p1.coeffs());
    assert!(injected > 0.05, "overlap {injected}");
    groups[1].orbitals[0] = Field::new(s2, c).unwrap();
    let merged = merge_meshes(&mut tree, &[&views[0], &views[1]]).unwrap();
    let sm = Arc::new(FeSpace::build(&tree, &merged).unwrap());
    let km = KsSystem::new(sm.clone()).unwrap();
    let res = orthogonalize_merged(&tree, &groups, &sm, km.kinetic(), km.mass()).unwrap();
    assert!(res.orthogonality <= 1e-10, "{:e}", res.orthogonality);
}
