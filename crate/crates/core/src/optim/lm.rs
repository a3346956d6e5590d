/// Lower clamp for the adapted damping coefficient.
pub const LM_MIN_DAMPING: f64 = 1e-10;
/// Upper clamp for the adapted damping coefficient.
pub const LM_MAX_DAMPING: f64 = 1e2;

const SHRINK_ABOVE: f64 = 0.75;
const GROW_BELOW: f64 = 0.25;

/// Levenberg–Marquardt reduction-ratio rule.
///
/// `r = (loss_before − loss_after) / predicted_reduction`; `r > 0.75` shrinks
/// the damping by `φ`, `r < 0.25` grows it by `1/φ`, otherwise it is kept.
/// A non-positive prediction leaves the damping unchanged. The result is
/// clamped to `[1e-10, 1e2]`.
pub fn lm_damping_update(current: f64, loss_before: f64, loss_after: f64, predicted_reduction: f64, discount: f64) -> f64 {
    let next = if !(predicted_reduction > 0.0) || !loss_after.is_finite() {
        if loss_after.is_finite() {
            current
        } else {
            current / discount
        }
    } else {
        let ratio = (loss_before - loss_after) / predicted_reduction;
        if ratio > SHRINK_ABOVE {
            current * discount
        } else if ratio < GROW_BELOW {
            current / discount
        } else {
            current
        }
    };
    next.clamp(LM_MIN_DAMPING, LM_MAX_DAMPING)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dead_zone_keeps_damping() {
        assert_eq!(lm_damping_update(1e-3, 1.0, 0.5, 1.0, 0.995), 1e-3);
    }

    #[test]
    fn good_ratio_shrinks() {
        let next = lm_damping_update(1e-3, 1.0, 0.1, 1.0, 0.995);
        assert!((next - 0.995e-3).abs() < 1e-18);
    }

    #[test]
    fn poor_ratio_grows() {
        let next = lm_damping_update(1e-3, 1.0, 0.9, 1.0, 0.5);
        assert!((next - 2e-3).abs() < 1e-18);
    }

    #[test]
    fn clamped() {
        assert_eq!(lm_damping_update(1e-10, 1.0, 0.0, 1.0, 0.5), LM_MIN_DAMPING);
        assert_eq!(lm_damping_update(80.0, 1.0, 2.0, 1.0, 0.5), LM_MAX_DAMPING);
    }
}
