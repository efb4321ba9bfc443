use serde::{Deserialize, Serialize};

/// Length of the exponential segment of [`smoothed_ramp`].
const EXP_END: f64 = 0.25;
/// `2^(K t / EXP_END)` growth over the exponential segment.
const EXP_DOUBLINGS: f64 = 4.0;

/// Value of the ramp where the two segments meet, chosen so that the slopes
/// agree there as well as the values.
fn join_value() -> f64 {
    let growth = EXP_DOUBLINGS.exp2();
    let slope_per_m = std::f64::consts::LN_2 * EXP_DOUBLINGS / EXP_END * growth / (growth - 1.0);
    1.0 / (1.0 + (1.0 - EXP_END) * slope_per_m)
}

/// Exponential growth from 0 on `[0, 0.25]`, then linear up to 1 at `t = 1`:
/// `m (2^(16 t) - 1) / 15` on the first segment and
/// `m + (1 - m)(t - 0.25) / 0.75` on the second, with `m ~= 0.101`.
pub fn smoothed_ramp(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    let m = join_value();
    if t >= 1.0 {
        1.0
    } else if t <= EXP_END {
        let growth = EXP_DOUBLINGS.exp2();
        m * ((EXP_DOUBLINGS * t / EXP_END).exp2() - 1.0) / (growth - 1.0)
    } else {
        m + (1.0 - m) * (t - EXP_END) / (1.0 - EXP_END)
    }
}

/// Triangular learning rate: 0 at `t = 0`, `peak` at `t = peak_fraction`,
/// 0 again at `t = 1`.
pub fn cyclic_lr(t: f64, peak: f64, peak_fraction: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    if peak_fraction <= 0.0 {
        peak * (1.0 - t)
    } else if t <= peak_fraction {
        peak * t / peak_fraction
    } else if peak_fraction >= 1.0 {
        peak
    } else {
        peak * (1.0 - t) / (1.0 - peak_fraction)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Cyclic,
    Long,
}

/// Schedule values for one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleState {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub bounding_eps: f64,
    /// Fraction of the regularisation coefficient in effect, in `[0, 1]`.
    pub coef_fraction: f64,
}

/// Ramp progress after `step` (0-based) when the ramp spans `ramp_steps`.
pub(crate) fn ramp_progress(step: usize, ramp_steps: usize) -> f64 {
    if ramp_steps == 0 {
        1.0
    } else {
        ((step + 1) as f64 / ramp_steps as f64).min(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_shape() {
        assert!(smoothed_ramp(0.0) <= 1e-3);
        assert_eq!(smoothed_ramp(1.0), 1.0);
        let mut prev = -1.0;
        for i in 0..=1000 {
            let v = smoothed_ramp(i as f64 / 1000.0);
            assert!(v >= prev && (0.0..=1.0).contains(&v));
            prev = v;
        }
        // both segments meet in value and slope
        let h = 1e-7;
        let left = (smoothed_ramp(0.25) - smoothed_ramp(0.25 - h)) / h;
        let right = (smoothed_ramp(0.25 + h) - smoothed_ramp(0.25)) / h;
        assert!((left - right).abs() < 1e-4);
        assert!((smoothed_ramp(0.25 - 1e-12) - smoothed_ramp(0.25 + 1e-12)).abs() < 1e-9);
    }

    #[test]
    fn cyclic_trace() {
        assert_eq!(cyclic_lr(0.0, 0.2, 0.5), 0.0);
        assert_eq!(cyclic_lr(0.5, 0.2, 0.5), 0.2);
        assert_eq!(cyclic_lr(1.0, 0.2, 0.5), 0.0);
        assert!((cyclic_lr(0.25, 0.2, 0.5) - 0.1).abs() < 1e-15);
        assert!((cyclic_lr(0.3, 1.0, 0.3) - 1.0).abs() < 1e-15);
    }
}
