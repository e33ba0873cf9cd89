//! Symmetric quadrature rules on the reference tetrahedron.
//!
//! Points are barycentric coordinates and weights sum to one, so an integral
//! over a physical tetrahedron is `volume * sum(w * f(x(lambda)))`.

use crate::geometry::Point3;

#[derive(Clone, Debug)]
pub struct Quadrature {
    pub order: u32,
    pub points: Vec<[f64; 4]>,
    pub weights: Vec<f64>,
}

fn orbit_1111(a: f64) -> Vec<[f64; 4]> {
    let b = 1.0 - 3.0 * a;
    vec![[b, a, a, a], [a, b, a, a], [a, a, b, a], [a, a, a, b]]
}

fn orbit_2200(c: f64, d: f64) -> Vec<[f64; 4]> {
    vec![[c, c, d, d], [c, d, c, d], [c, d, d, c], [d, c, c, d], [d, c, d, c], [d, d, c, c]]
}

impl Quadrature {
    /// One-point centroid rule, exact for linears.
    pub fn centroid() -> Self {
        Quadrature { order: 1, points: vec![[0.25; 4]], weights: vec![1.0] }
    }

    /// Four-point rule, exact for quadratics.
    pub fn order2() -> Self {
        let a = 0.138_196_601_125_010_5;
        Quadrature { order: 2, points: orbit_1111(a), weights: vec![0.25; 4] }
    }

    /// Fourteen-point rule with positive weights, exact through degree five.
    pub fn order5() -> Self {
        let (w1, a1) = (0.112_687_925_718_016_2, 0.310_885_919_263_300_6);
        let (w2, a2) = (0.073_493_043_116_361_9, 0.092_735_250_310_891_2);
        let (w3, c, d) = (0.042_546_020_777_081_5, 0.454_496_295_874_350_4, 0.045_503_704_125_649_6);
        let mut points = orbit_1111(a1);
        points.extend(orbit_1111(a2));
        points.extend(orbit_2200(c, d));
        let mut weights = vec![w1; 4];
        weights.extend([w2; 4]);
        weights.extend([w3; 6]);
        Quadrature { order: 5, points, weights }
    }

    /// The default rule for operator assembly.
    pub fn assembly() -> Self {
        Self::order5()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Map barycentric point `q` into the tetrahedron `x`.
    #[inline]
    pub fn map(x: &[Point3; 4], l: &[f64; 4]) -> Point3 {
        let mut p = [0.0; 3];
        for (xi, li) in x.iter().zip(l) {
            for k in 0..3 {
                p[k] += li * xi[k];
            }
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn factorial(n: u32) -> f64 {
        (1..=n).map(|k| k as f64).product()
    }

    // Exact reference: integral of l0^a l1^b l2^c l3^d over a tetrahedron,
    // divided by its volume, is a! b! c! d! 3! / (a+b+c+d+3)!.
    fn exact(e: [u32; 4]) -> f64 {
        e.iter().map(|&k| factorial(k)).product::<f64>() * 6.0 / factorial(e.iter().sum::<u32>() + 3)
    }

    fn check_rule(q: &Quadrature) {
        assert!(q.weights.iter().all(|&w| w > 0.0));
        assert!((q.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        for p in &q.points {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
        let n = q.order;
        for a in 0..=n {
            for b in 0..=n - a {
                for c in 0..=n - a - b {
                    for d in 0..=n - a - b - c {
                        let e = [a, b, c, d];
                        let approx: f64 = q
                            .points
                            .iter()
                            .zip(&q.weights)
                            .map(|(l, w)| w * (0..4).map(|i| l[i].powi(e[i] as i32)).product::<f64>())
                            .sum();
                        let ex = exact(e);
                        assert!((approx - ex).abs() < 1e-13, "order {n} fails on {e:?}: {approx} vs {ex}");
                    }
                }
            }
        }
    }

    #[test]
    fn rules_integrate_monomials_exactly() {
        check_rule(&Quadrature::centroid());
        check_rule(&Quadrature::order2());
        check_rule(&Quadrature::order5());
    }

    #[test]
    fn order5_is_not_exact_for_degree_six() {
        let q = Quadrature::order5();
        let approx: f64 = q.points.iter().zip(&q.weights).map(|(l, w)| w * l[0].powi(6)).sum();
        assert!((approx - exact([6, 0, 0, 0])).abs() > 1e-8);
    }
}
