//! Net doping profiles assembled from process-step primitives.
//!
//! A profile is an ordered list of primitives whose signed contributions
//! (donor +, acceptor -) sum pointwise. Coordinates are in micrometers,
//! concentrations in cm^-3.

use serde::{Deserialize, Serialize};

/// Dopant polarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DopantSign {
    Donor,
    Acceptor,
}

impl DopantSign {
    fn factor(self) -> f64 {
        match self {
            DopantSign::Donor => 1.0,
            DopantSign::Acceptor => -1.0,
        }
    }
}

/// Reference geometry a Gaussian process step decays away from.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Distance measured from the axis-aligned line `coord[axis] = at_um`.
    AxisLine { axis: usize, at_um: f64 },
    /// Distance to the closest point of the segment a-b.
    Segment { a_um: [f64; 2], b_um: [f64; 2] },
}

impl Baseline {
    fn distance(&self, x: [f64; 2]) -> f64 {
        match *self {
            Baseline::AxisLine { axis, at_um } => (x[axis] - at_um).abs(),
            Baseline::Segment { a_um, b_um } => {
                let d = [b_um[0] - a_um[0], b_um[1] - a_um[1]];
                let r = [x[0] - a_um[0], x[1] - a_um[1]];
                let len2 = d[0] * d[0] + d[1] * d[1];
                let t = if len2 > 0.0 {
                    ((r[0] * d[0] + r[1] * d[1]) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let px = [r[0] - t * d[0], r[1] - t * d[1]];
                (px[0] * px[0] + px[1] * px[1]).sqrt()
            }
        }
    }
}

/// Axis an abrupt interface or ramp varies along, or a radial ramp center.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RampCoordinate {
    Axis { axis: usize },
    Radial { center_um: [f64; 2] },
}

impl RampCoordinate {
    fn value(&self, x: [f64; 2]) -> f64 {
        match *self {
            RampCoordinate::Axis { axis } => x[axis],
            RampCoordinate::Radial { center_um } => {
                let dx = x[0] - center_um[0];
                let dy = x[1] - center_um[1];
                (dx * dx + dy * dy).sqrt()
            }
        }
    }
}

/// One doping process step.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DopingPrimitive {
    /// Constant background, `sign * level` everywhere.
    Uniform { level_cm3: f64, sign: DopantSign },
    /// Signed step along one axis with a declared value exactly at the
    /// interface.
    AbruptInterface {
        axis: usize,
        position_um: f64,
        left_cm3: f64,
        right_cm3: f64,
        midpoint_cm3: f64,
    },
    /// Degree-7 smooth ramp `base * (1 + 40 t^7 - 140 t^6 + 168 t^5 - 70 t^4)`
    /// with `t = (coord - start)/span` clamped to [0, 1]; runs from `+base`
    /// to `-base` with three vanishing derivatives at both ends.
    PolynomialRamp {
        coord: RampCoordinate,
        start_um: f64,
        span_um: f64,
        base_cm3: f64,
    },
    /// Gaussian decay from a baseline: `sign * peak * exp(-(d/decay)^2)`.
    GaussianStep {
        baseline: Baseline,
        peak_cm3: f64,
        decay_um: f64,
        sign: DopantSign,
    },
}

fn ramp_poly(t: f64) -> f64 {
    1.0 + t * t * t * t * (-70.0 + t * (168.0 + t * (-140.0 + t * 40.0)))
}

fn ramp_poly_deriv(t: f64) -> f64 {
    // 280 t^3 (t - 1)^3
    let u = t - 1.0;
    280.0 * t * t * t * u * u * u
}

impl DopingPrimitive {
    fn eval(&self, x: [f64; 2]) -> f64 {
        match *self {
            DopingPrimitive::Uniform { level_cm3, sign } => sign.factor() * level_cm3,
            DopingPrimitive::AbruptInterface {
                axis,
                position_um,
                left_cm3,
                right_cm3,
                midpoint_cm3,
            } => {
                let c = x[axis];
                if c < position_um {
                    left_cm3
                } else if c > position_um {
                    right_cm3
                } else {
                    midpoint_cm3
                }
            }
            DopingPrimitive::PolynomialRamp {
                coord,
                start_um,
                span_um,
                base_cm3,
            } => {
                let t = ((coord.value(x) - start_um) / span_um).clamp(0.0, 1.0);
                base_cm3 * ramp_poly(t)
            }
            DopingPrimitive::GaussianStep {
                ref baseline,
                peak_cm3,
                decay_um,
                sign,
            } => {
                let d = baseline.distance(x) / decay_um;
                sign.factor() * peak_cm3 * (-d * d).exp()
            }
        }
    }

    /// Analytic gradient where the primitive is smooth; `None` requests the
    /// symmetric-difference fallback.
    fn gradient(&self, x: [f64; 2]) -> Option<[f64; 2]> {
        match *self {
            DopingPrimitive::Uniform { .. } => Some([0.0, 0.0]),
            DopingPrimitive::AbruptInterface { .. } => None,
            DopingPrimitive::PolynomialRamp {
                coord,
                start_um,
                span_um,
                base_cm3,
            } => {
                let c = coord.value(x);
                let t = (c - start_um) / span_um;
                if !(0.0..=1.0).contains(&t) {
                    return Some([0.0, 0.0]);
                }
                let dv = base_cm3 * ramp_poly_deriv(t) / span_um;
                match coord {
                    RampCoordinate::Axis { axis } => {
                        let mut g = [0.0, 0.0];
                        g[axis] = dv;
                        Some(g)
                    }
                    RampCoordinate::Radial { center_um } => {
                        let r = c.max(1e-30);
                        Some([
                            dv * (x[0] - center_um[0]) / r,
                            dv * (x[1] - center_um[1]) / r,
                        ])
                    }
                }
            }
            DopingPrimitive::GaussianStep {
                ref baseline,
                peak_cm3,
                decay_um,
                sign,
            } => {
                let d = baseline.distance(x);
                let v = sign.factor() * peak_cm3 * (-(d / decay_um).powi(2)).exp();
                let dmag = -2.0 * d / (decay_um * decay_um) * v;
                match *baseline {
                    Baseline::AxisLine { axis, at_um } => {
                        let mut g = [0.0, 0.0];
                        g[axis] = dmag * (x[axis] - at_um).signum();
                        if x[axis] == at_um {
                            g[axis] = 0.0;
                        }
                        Some(g)
                    }
                    Baseline::Segment { .. } => None,
                }
            }
        }
    }
}

/// Signed sum of process-step primitives.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DopingProfile {
    pub steps: Vec<DopingPrimitive>,
}

impl DopingProfile {
    pub fn new(steps: Vec<DopingPrimitive>) -> Self {
        Self { steps }
    }

    /// Net doping N at a point (um in, signed cm^-3 out).
    pub fn eval(&self, x: [f64; 2]) -> f64 {
        self.steps.iter().map(|s| s.eval(x)).sum()
    }

    /// Gradient of N in cm^-3/um, analytic per primitive with a symmetric
    /// difference of half-width `h_um` where a primitive is nonsmooth.
    pub fn gradient(&self, x: [f64; 2], h_um: f64) -> [f64; 2] {
        let mut g = [0.0, 0.0];
        for step in &self.steps {
            match step.gradient(x) {
                Some(sg) => {
                    g[0] += sg[0];
                    g[1] += sg[1];
                }
                None => {
                    for axis in 0..2 {
                        let mut xp = x;
                        let mut xm = x;
                        xp[axis] += h_um;
                        xm[axis] -= h_um;
                        g[axis] += (step.eval(xp) - step.eval(xm)) / (2.0 * h_um);
                    }
                }
            }
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abrupt_case3() -> DopingProfile {
        DopingProfile::new(vec![DopingPrimitive::AbruptInterface {
            axis: 0,
            position_um: 10.0,
            left_cm3: 1e17,
            right_cm3: -1e17,
            midpoint_cm3: 0.0,
        }])
    }

    #[test]
    fn abrupt_interface_values() {
        let p = abrupt_case3();
        assert_eq!(p.eval([3.0, 0.0]), 1e17);
        assert_eq!(p.eval([10.0, 0.0]), 0.0);
        assert_eq!(p.eval([10.0001, 0.0]), -1e17);
    }

    #[test]
    fn smooth_ramp_endpoints() {
        let p = DopingProfile::new(vec![DopingPrimitive::PolynomialRamp {
            coord: RampCoordinate::Axis { axis: 0 },
            start_um: 0.0,
            span_um: 20.0,
            base_cm3: 1e17,
        }]);
        assert_eq!(p.eval([0.0, 0.0]), 1e17);
        // 1 + 40 - 140 + 168 - 70 = -1
        assert!((p.eval([20.0, 0.0]) + 1e17).abs() < 1e17 * 1e-14);
        // antisymmetric about the midpoint: zero crossing at x = 10 um
        assert!(p.eval([10.0, 0.0]).abs() < 1e17 * 1e-13);
        assert!(p.eval([9.99, 0.0]) > 0.0 && p.eval([10.01, 0.0]) < 0.0);
    }

    #[test]
    fn ramp_gradient_matches_differences() {
        let p = DopingProfile::new(vec![DopingPrimitive::PolynomialRamp {
            coord: RampCoordinate::Radial {
                center_um: [0.0, 0.0],
            },
            start_um: 9.0,
            span_um: 2.0,
            base_cm3: 1e17,
        }]);
        let x = [6.0, 8.0]; // r = 10
        let g = p.gradient(x, 1e-3);
        let h = 1e-4;
        for axis in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[axis] += h;
            xm[axis] -= h;
            let fd = (p.eval(xp) - p.eval(xm)) / (2.0 * h);
            assert!((g[axis] - fd).abs() <= 1e-6 * fd.abs().max(1.0), "axis {axis}");
        }
    }

    #[test]
    fn gaussian_step_peak_and_decay() {
        let p = DopingProfile::new(vec![DopingPrimitive::GaussianStep {
            baseline: Baseline::AxisLine { axis: 1, at_um: 1.0 },
            peak_cm3: 8e17,
            decay_um: 2.97,
            sign: DopantSign::Acceptor,
        }]);
        assert_eq!(p.eval([5.0, 1.0]), -8e17);
        let v = p.eval([5.0, 1.0 + 2.97]);
        assert!((v + 8e17 * (-1.0f64).exp()).abs() < 1e17 * 1e-12);
    }

    #[test]
    fn segment_baseline_distance() {
        let p = DopingProfile::new(vec![DopingPrimitive::GaussianStep {
            baseline: Baseline::Segment {
                a_um: [40.0, 0.0],
                b_um: [60.0, 0.0],
            },
            peak_cm3: 2e17,
            decay_um: 2.5,
            sign: DopantSign::Donor,
        }]);
        // On the segment: full peak. Off the end: Euclidean falloff.
        assert_eq!(p.eval([50.0, 0.0]), 2e17);
        let d = (3.0f64 * 3.0 + 4.0 * 4.0).sqrt() / 2.5;
        let expect = 2e17 * (-d * d).exp();
        assert!((p.eval([63.0, 4.0]) - expect).abs() < expect * 1e-12);
    }

    #[test]
    fn signed_sum_of_steps() {
        let p = DopingProfile::new(vec![
            DopingPrimitive::Uniform {
                level_cm3: 8e13,
                sign: DopantSign::Donor,
            },
            DopingPrimitive::GaussianStep {
                baseline: Baseline::AxisLine { axis: 1, at_um: 1.0 },
                peak_cm3: 8e17,
                decay_um: 2.97,
                sign: DopantSign::Acceptor,
            },
        ]);
        let at_peak = p.eval([5.0, 1.0]);
        assert!((at_peak - (8e13 - 8e17)).abs() < 1e6);
    }
}
