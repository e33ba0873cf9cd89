//! Spin-unpolarized LDA: Slater exchange and the VWN paramagnetic
//! correlation fit, in Hartree atomic units.

use std::sync::atomic::{AtomicU64, Ordering};

/// VWN paramagnetic fit parameters `(A, b, c, x0)` with `A` in Hartree.
pub const VWN_PARAMAGNETIC: (f64, f64, f64, f64) = (0.031_090_7, 3.727_44, 12.935_2, -0.104_98);

static NEGATIVE_DENSITY: AtomicU64 = AtomicU64::new(0);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct XcEval {
    /// Potential `d(rho e)/d rho`.
    pub v_xc: f64,
    /// Energy per electron.
    pub e_xc: f64,
}

/// Number of negative densities clamped to zero since process start.
pub fn negative_density_count() -> u64 {
    NEGATIVE_DENSITY.load(Ordering::Relaxed)
}

pub fn exchange(rho: f64) -> XcEval {
    let v = -(3.0 * rho / std::f64::consts::PI).cbrt();
    XcEval { v_xc: v, e_xc: 0.75 * v }
}

/// Correlation energy per electron and potential as functions of `r_s`.
pub fn vwn_correlation(rs: f64) -> XcEval {
    let (a, b, c, x0) = VWN_PARAMAGNETIC;
    let x = rs.sqrt();
    let xx = x * x + b * x + c;
    let xx0 = x0 * x0 + b * x0 + c;
    let q = (4.0 * c - b * b).sqrt();
    let t = q / (2.0 * x + b);
    let at = t.atan();
    let e = a
        * ((x * x / xx).ln() + 2.0 * b / q * at
            - b * x0 / xx0 * (((x - x0) * (x - x0) / xx).ln() + 2.0 * (b + 2.0 * x0) / q * at));
    let s = (2.0 * x + b) * (2.0 * x + b) + q * q;
    let de_dx = a
        * (2.0 / x
            - (2.0 * x + b) / xx
            - 4.0 * b / s
            - b * x0 / xx0 * (2.0 / (x - x0) - (2.0 * x + b) / xx - 4.0 * (b + 2.0 * x0) / s));
    XcEval { v_xc: e - x / 6.0 * de_dx, e_xc: e }
}

/// Pointwise LDA. Negative densities are clamped to zero and counted.
pub fn eval_lda(rho: f64) -> XcEval {
    let rho = if rho < 0.0 {
        NEGATIVE_DENSITY.fetch_add(1, Ordering::Relaxed);
        0.0
    } else {
        rho
    };
    if rho <= 0.0 || !rho.is_finite() {
        return XcEval { v_xc: 0.0, e_xc: 0.0 };
    }
    let rs = (3.0 / (4.0 * std::f64::consts::PI * rho)).cbrt();
    let x = exchange(rho);
    let c = vwn_correlation(rs);
    XcEval { v_xc: x.v_xc + c.v_xc, e_xc: x.e_xc + c.e_xc }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    // Independent evaluation of the VWN fit in terms of r_s, with the
    // potential taken from a Richardson-extrapolated derivative.
    fn vwn_oracle_energy(rs: f64) -> f64 {
        let (a, b, c, x0) = (0.0621814 / 2.0, 3.72744, 12.9352, -0.10498);
        let big_x = |y: f64| y * y + b * y + c;
        let q = (4.0 * c - b * b).sqrt();
        let y = rs.sqrt();
        let term1 = (rs / big_x(y)).ln();
        let term2 = 2.0 * b / q * (q / (2.0 * y + b)).atan();
        let term3 = ((y - x0).powi(2) / big_x(y)).ln() + 2.0 * (b + 2.0 * x0) / q * (q / (2.0 * y + b)).atan();
        a * (term1 + term2 - b * x0 / big_x(x0) * term3)
    }

    fn oracle_potential(rs: f64) -> f64 {
        let d = |h: f64| (vwn_oracle_energy(rs + h) - vwn_oracle_energy(rs - h)) / (2.0 * h);
        let h = 1e-3 * rs;
        let der = (4.0 * d(h / 2.0) - d(h)) / 3.0;
        vwn_oracle_energy(rs) - rs / 3.0 * der
    }

    #[test]
    fn exchange_identity() {
        assert!((exchange(PI / 3.0).v_xc + 1.0).abs() < 1e-15);
        assert_eq!(eval_lda(0.0), XcEval { v_xc: 0.0, e_xc: 0.0 });
    }

    #[test]
    fn correlation_matches_oracle() {
        for rs in [0.5, 1.0, 5.0] {
            let c = vwn_correlation(rs);
            assert!((c.e_xc - vwn_oracle_energy(rs)).abs() < 1e-10);
            assert!((c.v_xc - oracle_potential(rs)).abs() < 1e-10, "rs={rs}");
        }
        // Textbook magnitude check at r_s = 1 (about -0.06 Hartree).
        assert!((vwn_correlation(1.0).e_xc + 0.0600).abs() < 1e-3);
    }

    #[test]
    fn potential_is_derivative_of_energy_density() {
        let mut rho = 1e-6;
        while rho <= 1e2 {
            let f = |r: f64| r * eval_lda(r).e_xc;
            let h = 1e-4 * rho;
            let fd = (f(rho + h) - f(rho - h)) / (2.0 * h);
            let v = eval_lda(rho).v_xc;
            assert!(((fd - v) / v).abs() < 1e-6, "rho={rho}");
            rho *= 3.7;
        }
    }

    #[test]
    fn signs_and_monotonicity() {
        let mut last = 0.0;
        for k in 1..200 {
            let rho = 1e-5 * 1.1f64.powi(k);
            let e = eval_lda(rho);
            assert!(e.v_xc < 0.0 && e.e_xc < 0.0);
            let vx = exchange(rho).v_xc;
            assert!(vx < last);
            last = vx;
        }
    }

    #[test]
    fn negative_density_is_clamped_and_counted() {
        let before = negative_density_count();
        assert_eq!(eval_lda(-1.0), XcEval { v_xc: 0.0, e_xc: 0.0 });
        assert!(negative_density_count() > before);
    }
}
