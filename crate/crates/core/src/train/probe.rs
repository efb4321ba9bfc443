use super::EpochMetrics;

/// Catastrophic-overfitting thresholds. An epoch is flagged when its
/// (smoothed) PGD accuracy is below `pgd_below` while its (smoothed)
/// single-step training accuracy is above `train_above`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoThresholds {
    pub pgd_below: f64,
    pub train_above: f64,
    /// Centered moving-average width; 1 disables smoothing.
    pub window: usize,
}

impl Default for CoThresholds {
    fn default() -> Self {
        CoThresholds {
            pgd_below: 0.05,
            train_above: 0.6,
            window: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoVerdict {
    pub flagged: bool,
    /// Epoch number of the first flagged row.
    pub onset_epoch: Option<usize>,
}

/// Centered moving average ignoring NaN entries; edges use the available
/// neighbours.
fn smooth(v: &[f64], window: usize) -> Vec<f64> {
    let half = window.max(1) / 2;
    (0..v.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(v.len());
            let vals: Vec<f64> = v[lo..hi].iter().copied().filter(|x| !x.is_nan()).collect();
            if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        })
        .collect()
}

pub fn co_probe(history: &[EpochMetrics], th: &CoThresholds) -> CoVerdict {
    let train: Vec<f64> = history.iter().map(|m| m.attack_train_acc).collect();
    let pgd: Vec<f64> = history.iter().map(|m| m.pgd_acc).collect();
    let (train, pgd) = (smooth(&train, th.window), smooth(&pgd, th.window));
    let onset = history
        .iter()
        .zip(train.iter().zip(&pgd))
        .find(|(_, (&t, &p))| p < th.pgd_below && t > th.train_above)
        .map(|(m, _)| m.epoch);
    CoVerdict {
        flagged: onset.is_some(),
        onset_epoch: onset,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn history(train: &[f64], pgd: &[f64]) -> Vec<EpochMetrics> {
        train
            .iter()
            .zip(pgd)
            .enumerate()
            .map(|(i, (&t, &p))| EpochMetrics {
                epoch: i + 1,
                clean_acc: 0.9,
                attack_train_acc: t,
                pgd_acc: p,
                ibp_cert_acc: 0.0,
                ibp_loss: 0.0,
                forwabs_gap: 0.0,
                lr: 0.0,
                eps_bound: 0.0,
                wall_ms: 0,
            })
            .collect()
    }

    #[test]
    fn co_rising_is_clean() {
        let h = history(&[0.3, 0.4, 0.5, 0.6, 0.7], &[0.2, 0.3, 0.35, 0.4, 0.45]);
        assert!(!co_probe(&h, &CoThresholds::default()).flagged);
    }

    #[test]
    fn collapse_is_flagged_stably() {
        let train = [0.75, 0.8, 0.85, 0.9, 0.93, 0.95, 0.95];
        let pgd = [0.7, 0.6, 0.4, 0.02, 0.01, 0.01, 0.01];
        let h = history(&train, &pgd);
        let raw = co_probe(&h, &CoThresholds::default());
        assert_eq!(raw.onset_epoch, Some(4));
        let smoothed = co_probe(
            &h,
            &CoThresholds {
                window: 3,
                ..Default::default()
            },
        );
        let d = smoothed.onset_epoch.unwrap() as i64 - 4;
        assert!(d.abs() <= 1);
        let strict = CoThresholds {
            pgd_below: 0.005,
            ..Default::default()
        };
        assert!(!co_probe(&h, &strict).flagged);
    }
}
