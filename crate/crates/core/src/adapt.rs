//! Gradient-based cell indicators and HA/conventional marking.

use crate::error::ConfigError;
use crate::hdg::{DiscreteState, GradField, HdgSystem};
use crate::mesh::{CellId, Mesh, SchemeTag};

/// Per-cell nonnegative indicator values.
#[derive(Debug, Clone)]
pub struct IndicatorField {
    pub tag: GradField,
    pub values: Vec<f64>,
}

/// Cellwise L2 norm of the chosen gradient: the potential indicator uses
/// the HDG auxiliary field -E, the carrier indicator the local polynomial
/// gradient, the doping indicator the analytic profile gradient.
pub fn compute_indicator(
    system: &HdgSystem,
    state: Option<&DiscreteState>,
    tag: GradField,
) -> IndicatorField {
    IndicatorField {
        tag,
        values: system.cell_gradient_norms(state, tag),
    }
}

/// Tags cell i HA iff value_i > fraction * max_j value_j; other cells keep
/// their configured tag. An all-zero field marks nothing.
pub fn mark_ha(
    indicator: &IndicatorField,
    fraction: f64,
    base: &[SchemeTag],
) -> Vec<SchemeTag> {
    assert_eq!(indicator.values.len(), base.len());
    let max = indicator.values.iter().cloned().fold(0.0f64, f64::max);
    indicator
        .values
        .iter()
        .zip(base)
        .map(|(&v, &tag)| if v > fraction * max { SchemeTag::Ha } else { tag })
        .collect()
}

/// What to do with the cells matched by a region predicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionAction {
    Refine,
    SetDegree(u8),
    SetHa,
}

/// Cells whose centroid satisfies the predicate.
pub fn cells_in_region(mesh: &Mesh, pred: impl Fn([f64; 2]) -> bool) -> Vec<CellId> {
    mesh.cells
        .iter()
        .enumerate()
        .filter(|(_, c)| pred(c.centroid()))
        .map(|(i, _)| i)
        .collect()
}

/// Applies a degree/HA action to the marked cells, validating degrees.
pub fn apply_region_tags(
    tags: &mut [SchemeTag],
    marked: &[CellId],
    action: RegionAction,
) -> Result<(), ConfigError> {
    match action {
        RegionAction::Refine => Ok(()),
        RegionAction::SetDegree(p) => {
            if !(1..=3).contains(&p) {
                return Err(ConfigError::HaDegree(p));
            }
            for &c in marked {
                tags[c] = SchemeTag::Conventional(p);
            }
            Ok(())
        }
        RegionAction::SetHa => {
            for &c in marked {
                tags[c] = SchemeTag::Ha;
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(values: Vec<f64>) -> IndicatorField {
        IndicatorField {
            tag: GradField::Psi,
            values,
        }
    }

    #[test]
    fn threshold_arithmetic() {
        let base = vec![SchemeTag::Conventional(2); 3];
        let tags = mark_ha(&field(vec![10.0, 1.0, 1.0]), 0.2, &base);
        assert_eq!(tags, vec![SchemeTag::Ha, SchemeTag::Conventional(2), SchemeTag::Conventional(2)]);
    }

    #[test]
    fn all_equal_marks_everything() {
        let base = vec![SchemeTag::Conventional(1); 4];
        let tags = mark_ha(&field(vec![3.0; 4]), 0.2, &base);
        assert!(tags.iter().all(|t| *t == SchemeTag::Ha));
    }

    #[test]
    fn zero_field_marks_nothing() {
        let base = vec![SchemeTag::Conventional(3); 2];
        let tags = mark_ha(&field(vec![0.0, 0.0]), 0.2, &base);
        assert_eq!(tags, base);
    }

    #[test]
    fn marking_is_scale_equivariant() {
        let base = vec![SchemeTag::Conventional(1); 5];
        let v = vec![0.1, 2.0, 0.5, 1.9, 0.05];
        let a = mark_ha(&field(v.clone()), 0.2, &base);
        let b = mark_ha(&field(v.iter().map(|x| x * 731.0).collect()), 0.2, &base);
        assert_eq!(a, b);
    }

    #[test]
    fn region_predicates() {
        let mesh = Mesh::uniform_1d(0.0, 20.0, 10, &[]).unwrap();
        let empty = cells_in_region(&mesh, |_| false);
        assert!(empty.is_empty());
        let mid = cells_in_region(&mesh, |c| c[0] > 8.0 && c[0] < 12.0);
        assert_eq!(mid.len(), 2);
        let mut tags = vec![SchemeTag::Conventional(2); 10];
        apply_region_tags(&mut tags, &mid, RegionAction::SetHa).unwrap();
        assert_eq!(tags.iter().filter(|t| **t == SchemeTag::Ha).count(), 2);
        assert!(apply_region_tags(&mut tags, &mid, RegionAction::SetDegree(9)).is_err());
    }
}
