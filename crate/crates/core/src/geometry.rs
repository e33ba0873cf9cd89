//! Small fixed-size geometry helpers on plain arrays.

pub type Point3 = [f64; 3];

#[inline]
pub fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn dot(a: &Point3, b: &Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: &Point3, b: &Point3) -> Point3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
pub fn norm(a: &Point3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist(a: &Point3, b: &Point3) -> f64 {
    norm(&sub(a, b))
}

/// Signed volume times six.
#[inline]
pub fn det6(x: &[Point3; 4]) -> f64 {
    let u = sub(&x[1], &x[0]);
    let v = sub(&x[2], &x[0]);
    let w = sub(&x[3], &x[0]);
    dot(&u, &cross(&v, &w))
}

pub fn tet_volume(x: &[Point3; 4]) -> f64 {
    det6(x).abs() / 6.0
}

pub fn longest_edge(x: &[Point3; 4]) -> f64 {
    let mut h: f64 = 0.0;
    for i in 0..4 {
        for j in i + 1..4 {
            h = h.max(dist(&x[i], &x[j]));
        }
    }
    h
}

pub fn centroid(x: &[Point3; 4]) -> Point3 {
    let mut c = [0.0; 3];
    for p in x {
        for k in 0..3 {
            c[k] += 0.25 * p[k];
        }
    }
    c
}

pub fn triangle_area(a: &Point3, b: &Point3, c: &Point3) -> f64 {
    0.5 * norm(&cross(&sub(b, a), &sub(c, a)))
}

/// Barycentric coordinates of `p` in the tetrahedron `x`.
pub fn barycentric(x: &[Point3; 4], p: &Point3) -> [f64; 4] {
    let d = det6(x);
    let sub_det = |k: usize| {
        let mut y = *x;
        y[k] = *p;
        det6(&y) / d
    };
    let l1 = sub_det(1);
    let l2 = sub_det(2);
    let l3 = sub_det(3);
    [1.0 - l1 - l2 - l3, l1, l2, l3]
}

/// Gradients of the four barycentric functions of a non-degenerate tetrahedron.
pub fn bary_gradients(x: &[Point3; 4]) -> [Point3; 4] {
    let d = det6(x);
    let e1 = sub(&x[1], &x[0]);
    let e2 = sub(&x[2], &x[0]);
    let e3 = sub(&x[3], &x[0]);
    let g1 = cross(&e2, &e3).map(|c| c / d);
    let g2 = cross(&e3, &e1).map(|c| c / d);
    let g3 = cross(&e1, &e2).map(|c| c / d);
    let g0 = [-(g1[0] + g2[0] + g3[0]), -(g1[1] + g2[1] + g3[1]), -(g1[2] + g2[2] + g3[2])];
    [g0, g1, g2, g3]
}

/// Part of the tetrahedron `x` where the affine function with vertex values
/// `s` is non-negative, as a list of tetrahedra.
pub fn clip_tet(x: &[Point3; 4], s: [f64; 4]) -> Vec<[Point3; 4]> {
    let inside: Vec<usize> = (0..4).filter(|&i| s[i] >= 0.0).collect();
    let outside: Vec<usize> = (0..4).filter(|&i| s[i] < 0.0).collect();
    let cut = |i: usize, j: usize| {
        let t = s[i] / (s[i] - s[j]);
        [0, 1, 2].map(|k| x[i][k] + t * (x[j][k] - x[i][k]))
    };
    match (inside.as_slice(), outside.as_slice()) {
        (_, []) => vec![*x],
        ([], _) => Vec::new(),
        (&[a], &[b, c, d]) => vec![[x[a], cut(a, b), cut(a, c), cut(a, d)]],
        (&[a, b, c], &[d]) => {
            let (ad, bd, cd) = (cut(a, d), cut(b, d), cut(c, d));
            vec![[x[a], x[b], x[c], ad], [x[b], x[c], ad, bd], [x[c], ad, bd, cd]]
        }
        (&[a, b], &[c, d]) => {
            let (ac, ad, bc, bd) = (cut(a, c), cut(a, d), cut(b, c), cut(b, d));
            vec![[x[a], ac, ad, x[b]], [ac, ad, x[b], bc], [ad, x[b], bc, bd]]
        }
        _ => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const T: [Point3; 4] = [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 4.0]];

    #[test]
    fn volume_and_barycentrics() {
        assert!((tet_volume(&T) - 4.0).abs() < 1e-14);
        let b = barycentric(&T, &[0.5, 0.75, 1.0]);
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!((b[1] - 0.25).abs() < 1e-14 && (b[2] - 0.25).abs() < 1e-14);
    }

    #[test]
    fn clipping_partitions_the_volume() {
        for s in [[1.0, -1.0, -2.0, -0.5], [1.0, 2.0, 0.5, -1.0], [1.0, 0.3, -0.2, -1.0], [0.0, 1.0, 1.0, 1.0]] {
            let neg = s.map(|v: f64| -v);
            let a: f64 = clip_tet(&T, s).iter().map(tet_volume).sum();
            let b: f64 = clip_tet(&T, neg).iter().map(tet_volume).sum();
            assert!((a + b - tet_volume(&T)).abs() < 1e-13, "{s:?}: {a} + {b}");
        }
        // the kept part of a single-corner cut is the corner tetrahedron
        let corner: f64 = clip_tet(&T, [1.0, -1.0, -1.0, -1.0]).iter().map(tet_volume).sum();
        assert!((corner - tet_volume(&T) / 8.0).abs() < 1e-14);
    }

    #[test]
    fn gradients_reproduce_linear_functions() {
        let g = bary_gradients(&T);
        for (i, gi) in g.iter().enumerate() {
            for (j, xj) in T.iter().enumerate() {
                let v = dot(gi, &sub(xj, &T[0])) + if i == 0 { 1.0 } else { 0.0 };
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-13);
            }
        }
    }
}
