//! The Bernoulli function `B(x) = x / (exp(x) - 1)` and its derivative.
//!
//! This kernel sits under every exponentially fitted flux in the crate: the
//! Scharfetter-Gummel face fluxes of the finite-volume backend and the
//! harmonic-averaging bilinear forms of the HDG-HA cells. Arguments reach
//! thousands of thermal units across heavily doped junctions, so both
//! branches must stay finite over the whole f64 range.

/// Evaluates `B(x) = x / (exp(x) - 1)` with the removable singularity at 0
/// handled, accurate to ~1e-15 relative and free of overflow for any finite x.
pub fn bernoulli(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        // 4-term Taylor expansion of x/(e^x - 1).
        let x2 = x * x;
        return 1.0 - 0.5 * x + x2 / 12.0 - x2 * x2 / 720.0;
    }
    if x > 0.0 {
        // x e^-x / (1 - e^-x); e^-x underflows gracefully for huge x.
        let em = (-x).exp();
        x * em / (-f64::exp_m1(-x))
    } else {
        // exp_m1(x) in (-1, 0): no overflow, full precision near the pole.
        x / f64::exp_m1(x)
    }
}

/// Evaluates `B(x)` and its derivative `B'(x)`.
///
/// Uses `B'(x) = B(x) (1 - B(-x)) / x` away from 0 (with `B(-x) = B(x) + x`)
/// and the Taylor expansion `-1/2 + x/6 - x^3/180` near 0.
pub fn bernoulli_with_derivative(x: f64) -> (f64, f64) {
    let b = bernoulli(x);
    if x.abs() < 1e-4 {
        let db = -0.5 + x / 6.0 - x * x * x / 180.0;
        (b, db)
    } else {
        let b_neg = b + x;
        (b, b * (1.0 - b_neg) / x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn value_at_zero() {
        assert_eq!(bernoulli(0.0), 1.0);
        let (b, db) = bernoulli_with_derivative(0.0);
        assert_eq!(b, 1.0);
        assert_eq!(db, -0.5);
    }

    #[test]
    fn reference_values() {
        // Extended-precision (30-digit) evaluations of x/(e^x - 1).
        let cases = [
            (0.1, 0.950_833_194_477_504_96),
            (1e-4, 0.999_950_000_833_333_33),
            (1e-3, 0.999_500_083_333_331_94),
            (0.5, 0.770_747_041_268_399_14),
            (3.0, 0.157_187_089_473_767_86),
            (30.0, 2.807_286_890_652_315_1e-12),
            (300.0, 1.544_460_066_723_604_1e-128),
            (-1e-3, 1.000_500_083_333_331_9),
            (-2.0, 2.313_035_285_499_331_3),
            (-50.0, 50.0),
        ];
        for (x, expect) in cases {
            let rel = (bernoulli(x) - expect).abs() / expect;
            assert!(rel < 1e-14, "x={x}: rel={rel:e}");
        }
    }

    #[test]
    fn extreme_arguments_stay_finite() {
        for &x in &[700.0, 7000.0, 1e6, -700.0, -7000.0, -1e6] {
            let (b, db) = bernoulli_with_derivative(x);
            assert!(b.is_finite() && db.is_finite(), "x={x}");
            assert!(b >= 0.0);
        }
        assert!((bernoulli(-1e6) - 1e6).abs() < 1e-9 * 1e6);
        assert_eq!(bernoulli(1e6), 0.0); // underflows cleanly
    }

    #[test]
    fn derivative_matches_central_differences() {
        for &x in &[-200.0f64, -5.0, -0.3, -1e-3, 2e-5, 0.7, 8.0, 120.0] {
            let h = 1e-6 * (1.0 + x.abs());
            let fd = (bernoulli(x + h) - bernoulli(x - h)) / (2.0 * h);
            let (_, db) = bernoulli_with_derivative(x);
            let rel = (db - fd).abs() / fd.abs().max(1e-300);
            assert!(rel < 1e-6, "x={x}: db={db} fd={fd}");
        }
    }

    proptest! {
        // B(-x) - B(x) = x, the identity behind Scharfetter-Gummel symmetry.
        #[test]
        fn reflection_identity(x in -700.0..700.0f64) {
            let lhs = bernoulli(-x) - bernoulli(x);
            prop_assert!((lhs - x).abs() <= 1e-13 * (1.0 + x.abs()));
        }

        // B(x) + x/2 is even, equivalently B is positive and monotone class.
        #[test]
        fn even_part(x in -700.0..700.0f64) {
            let lhs = bernoulli(x) + 0.5 * x;
            let rhs = bernoulli(-x) - 0.5 * x;
            prop_assert!((lhs - rhs).abs() <= 1e-13 * (1.0 + x.abs()));
            prop_assert!(bernoulli(x) > 0.0);
        }
    }
}
