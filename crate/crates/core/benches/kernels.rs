//! Data-parallel kernels on the rayon pool against the single-thread path.

use std::hint::black_box;
use std::sync::Arc;
use std::time::{Duration, Instant};

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use eigsplit_core::fespace::{integrate_cross, FeSpace, Field};
use eigsplit_core::geometry;
use eigsplit_core::hgt::Hgt;
use eigsplit_core::par;
use eigsplit_core::quadrature::Quadrature;
use eigsplit_core::sparse::{Pattern, SparseMatrix};

fn setup() -> (Hgt, Arc<FeSpace>, Arc<FeSpace>) {
    let mut tree = Hgt::cube(4.0, 6).unwrap();
    let root = tree.root_view();
    let near: Vec<_> = root
        .leaves()
        .iter()
        .copied()
        .filter(|&l| geometry::norm(&geometry::centroid(&tree.tet_coords(l))) < 2.0)
        .collect();
    let local = tree.refine(&root, &near).unwrap();
    let uniform = tree.refine_uniform(&root).unwrap();
    let a = Arc::new(FeSpace::build(&tree, &local).unwrap());
    let b = Arc::new(FeSpace::build(&tree, &uniform).unwrap());
    (tree, a, b)
}

/// Timing loop for `iter_custom`. The single-thread pool is entered once per
/// sample, not once per iteration.
fn timed<'a>(seq: bool, work: &'a (dyn Fn() + Sync)) -> impl FnMut(u64) -> Duration + 'a {
    move |iters| {
        let body = || {
            let t = Instant::now();
            for _ in 0..iters {
                work();
            }
            t.elapsed()
        };
        if seq {
            par::sequential(body)
        } else {
            body()
        }
    }
}

fn kernels(c: &mut Criterion) {
    let (tree, sa, sb) = setup();
    let pattern = Pattern::from_space(&sb);
    let k = SparseMatrix::assemble(&sb, &pattern, |e| e.stiffness()).unwrap();
    let x: Vec<f64> = (0..k.n()).map(|i| (i as f64).sin()).collect();
    let f = Field::from_fn(sa.clone(), |p| (-geometry::norm(p)).exp());
    let g = Field::from_fn(sb.clone(), |p| 1.0 + p[0]);
    let q = Quadrature::order5();

    let mut group = c.benchmark_group("kernels");
    group.sample_size(20);
    for (mode, seq) in [("parallel", false), ("sequential", true)] {
        let assemble = || drop(black_box(SparseMatrix::assemble(&sb, &pattern, |e| e.stiffness()).unwrap()));
        group.bench_function(BenchmarkId::new("assemble_stiffness", mode), |b| b.iter_custom(timed(seq, &assemble)));
        let matvec = || {
            let mut y = vec![0.0; k.n()];
            k.matvec(&x, &mut y);
            black_box(y);
        };
        group.bench_function(BenchmarkId::new("matvec", mode), |b| b.iter_custom(timed(seq, &matvec)));
        let cross = || {
            black_box(integrate_cross(&tree, &[(&f, 2), (&g, 1)], &q).unwrap());
        };
        group.bench_function(BenchmarkId::new("integrate_cross", mode), |b| b.iter_custom(timed(seq, &cross)));
    }
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
