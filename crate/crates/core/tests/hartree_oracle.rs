use std::f64::consts::PI;
use std::sync::Arc;

use eigsplit_core::fespace::{FeSpace, Field};
use eigsplit_core::geometry::{self, Point3};
use eigsplit_core::hartree::{compute_moments, compute_moments_fn, MultipoleMoments, PoissonOptions, PoissonSystem};
use eigsplit_core::hgt::{Hgt, MeshView};
use eigsplit_core::quadrature::Quadrature;

fn gaussian(sigma: f64) -> impl Fn(&Point3) -> f64 + Sync + Send {
    let norm = (2.0 * PI * sigma * sigma).powf(-1.5);
    move |p: &Point3| norm * (-geometry::dot(p, p) / (2.0 * sigma * sigma)).exp()
}

fn gaussian_potential(sigma: f64, r: f64) -> f64 {
    if r < 1e-12 {
        (2.0 / PI).sqrt() / sigma
    } else {
        libm::erf(r / (sigma * 2f64.sqrt())) / r
    }
}

/// Refine until every cell is smaller than `h + grade * distance` from the origin.
fn graded_mesh(tree: &mut Hgt, mut view: MeshView, h: f64, grade: f64) -> MeshView {
    loop {
        let marked: Vec<_> = view
            .leaves()
            .iter()
            .copied()
            .filter(|&c| {
                let x = tree.tet_coords(c);
                let diam = tree.cell_diameter(c);
                let d = (geometry::norm(&geometry::centroid(&x)) - diam).max(0.0);
                diam > h + grade * d
            })
            .collect();
        if marked.is_empty() {
            return view;
        }
        view = tree.refine(&view, &marked).unwrap();
    }
}

#[test]
fn gaussian_potential_matches_erf_form() {
    let sigma: f64 = 1.0;
    let half = 6.0 * sigma;
    // h is the element diameter, the long diagonal of a coarse cube cell
    let n = (2.0 * half * 3f64.sqrt() / (0.5 * sigma)).ceil() as usize;
    let tree = Hgt::cube(half, n).unwrap();
    let h = tree.root_view().leaves().iter().map(|&c| tree.cell_diameter(c)).fold(0.0, f64::max);
    assert!(h <= 0.5 * sigma + 1e-12);
    let space = Arc::new(FeSpace::build(&tree, &tree.root_view()).unwrap());
    let sys = PoissonSystem::new(space.clone()).unwrap();
    let rho = gaussian(sigma);
    let m = compute_moments_fn(&space, &rho).unwrap();
    assert!((m.charge - 1.0).abs() < 1e-3);
    let g = sys.boundary_data(&m).unwrap();
    let b = sys.load_fn(&rho);
    let (phi, _) = sys.solve_with(&b, &g, &PoissonOptions::default()).unwrap();
    let err = space
        .dof_points()
        .iter()
        .zip(&phi)
        .map(|(p, v)| (v - gaussian_potential(sigma, geometry::norm(p))).abs())
        .fold(0.0, f64::max);
    eprintln!("gaussian L-inf error at h = sigma/2: {err:.3e}");
    assert!(err <= 5e-3, "L-inf error {err}");
    assert!(phi.iter().all(|&v| v >= -1e-10));
}

#[test]
fn monopole_is_exact_when_higher_moments_vanish() {
    let c = [0.3, -0.2, 0.1];
    let mut m = MultipoleMoments::monopole(2.5, c);
    // an isotropic second moment carries no quadrupole field
    for i in 0..3 {
        m.quadrupole[i][i] = 0.7;
    }
    for p in [[5.0, 1.0, -2.0], [-5.0, 5.0, 5.0], [0.0, 0.0, 5.0]] {
        let exact = 2.5 / geometry::dist(&p, &c);
        assert!((m.potential(&p).unwrap() - exact).abs() <= 1e-12 * exact);
    }
}

#[test]
fn quadrupole_expansion_tracks_brute_force_coulomb_integral() {
    let tree = Hgt::cube(3.0, 12).unwrap();
    let space = FeSpace::build(&tree, &tree.root_view()).unwrap();
    let blob = |p: &Point3, a: f64| (-2.0 * ((p[0] - a).powi(2) + p[1] * p[1] + p[2] * p[2])).exp();
    let rho = |p: &Point3| blob(p, 0.8) + blob(p, -0.8);
    let m = compute_moments_fn(&space, rho).unwrap();
    let mono = MultipoleMoments::monopole(m.charge, m.center);
    let quad = Quadrature::assembly();
    for target in [[12.0, 0.0, 0.0], [0.0, 12.0, 0.0], [7.0, 7.0, 5.0]] {
        let mut brute = 0.0;
        for el in space.elements() {
            for (l, w) in quad.points.iter().zip(&quad.weights) {
                let x = Quadrature::map(&el.x, l);
                brute += w * el.volume * rho(&x) / geometry::dist(&target, &x);
            }
        }
        let e_quad = (m.potential(&target).unwrap() - brute).abs();
        let e_mono = (mono.potential(&target).unwrap() - brute).abs();
        assert!(e_quad < 0.1 * e_mono, "{target:?}: {e_quad:e} vs {e_mono:e}");
    }
}

#[test]
fn hydrogen_density_potential_approaches_one_over_r() {
    let half = 10.0;
    let mut tree = Hgt::cube(half, 4).unwrap();
    let root = tree.root_view();
    let view = graded_mesh(&mut tree, root, 0.08, 0.35);
    let space = Arc::new(FeSpace::build(&tree, &view).unwrap());
    let rho = Field::from_fn(space.clone(), |p| (-2.0 * geometry::norm(p)).exp() / PI);
    let sys = PoissonSystem::new(space.clone()).unwrap();
    let sol = sys.solve(&tree, &rho, &PoissonOptions::default()).unwrap();
    let m = sol.moments.unwrap();
    assert!((m.charge - 1.0).abs() < 1e-2);
    let exact = |r: f64| 1.0 / r - (-2.0 * r).exp() * (1.0 / r + 1.0);
    for p in [[half, 0.0, 0.0], [0.0, -half, 0.0], [0.0, 0.0, half], [half, half, 0.0]] {
        let v = sol.phi.evaluate(&tree, &p).unwrap();
        let r = geometry::norm(&p);
        assert!((v - exact(r)).abs() < 1e-3, "{p:?}: {v} vs {}", exact(r));
    }
}

#[test]
fn potential_is_linear_in_density_and_nonnegative() {
    let tree = Hgt::cube(4.0, 6).unwrap();
    let space = Arc::new(FeSpace::build(&tree, &tree.root_view()).unwrap());
    let sys = PoissonSystem::new(space.clone()).unwrap();
    let a = Field::from_fn(space.clone(), |p| (-(geometry::dot(p, p))).exp());
    let b = Field::from_fn(space.clone(), |p| (-2.0 * geometry::dist(p, &[1.0, 0.5, 0.0])).exp());
    let mut ab = a.clone();
    ab.axpy(1.0, &b).unwrap();
    let opts = PoissonOptions { tol: 1e-13, ..Default::default() };
    // common boundary data keeps the map linear
    let m = compute_moments(&ab).unwrap();
    let solve = |f: &Field, scale: f64| {
        let mut g = sys.boundary_data(&m).unwrap();
        g.iter_mut().for_each(|x| *x *= scale);
        let b: Vec<f64> = sys.mass().mul(f.coeffs()).iter().map(|x| 4.0 * PI * x).collect();
        sys.solve_with(&b, &g, &opts).unwrap().0
    };
    let qa = compute_moments(&a).unwrap().charge / m.charge;
    let (pa, pb, pab) = (solve(&a, qa), solve(&b, 1.0 - qa), solve(&ab, 1.0));
    let scale = pab.iter().fold(0.0f64, |s, x| s.max(x.abs()));
    for i in 0..pab.len() {
        assert!((pa[i] + pb[i] - pab[i]).abs() < 1e-9 * scale);
    }
    let sol = sys.solve(&tree, &ab, &PoissonOptions::default()).unwrap();
    assert!(sol.phi.coeffs().iter().all(|&v| v >= -1e-10));
}
