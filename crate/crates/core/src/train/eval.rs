use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig};
use crate::bounds::{self, BoundOptions, BoundStats};
use crate::data::Dataset;
use crate::error::Result;
use crate::network::{BnMode, Network};
use crate::rng;
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct EvalConfig {
    /// Radius for the attack and for certification.
    pub eps: f64,
    pub attack: AttackConfig,
    /// Evaluate on at most this many samples (the first ones).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_samples: Option<usize>,
    pub batch_size: usize,
}

impl EvalConfig {
    pub fn new(eps: f64, attack: AttackConfig) -> Self {
        EvalConfig {
            eps,
            attack,
            max_samples: None,
            batch_size: 500,
        }
    }
}

/// Accuracies are fractions in `[0, 1]`; losses and gaps are means.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalMetrics {
    pub clean_acc: f64,
    pub pgd_acc: f64,
    pub ibp_cert_acc: f64,
    pub ibp_loss: f64,
    pub forwabs_gap: f64,
}

/// Clean, attacked and IBP-certified accuracy with running BatchNorm
/// statistics. The attack in `cfg` runs at radius `cfg.eps`; each chunk gets
/// its own attack seed.
pub fn evaluate(net: &Network, data: &Dataset, cfg: &EvalConfig) -> Result<EvalMetrics> {
    let n = cfg.max_samples.map_or(data.len(), |m| m.min(data.len()));
    let mut attack = cfg.attack.clone();
    attack.eps = cfg.eps;
    let forwabs_gap = bounds::forwabs_gap(net, cfg.eps, BoundStats::Running)?.total;
    if n == 0 {
        return Ok(EvalMetrics {
            forwabs_gap,
            ..Default::default()
        });
    }
    let (mut clean, mut robust, mut cert, mut ibp_sum) = (0usize, 0usize, 0usize, 0.0);
    let idx: Vec<usize> = (0..n).collect();
    for (chunk_no, chunk) in idx.chunks(cfg.batch_size.max(1)).enumerate() {
        let (x, y) = data.batch(chunk);
        let hits = |pred: Vec<usize>| pred.iter().zip(&y).filter(|(p, t)| p == t).count();
        clean += hits(net.predict(&x)?.argmax_rows());
        let a = attack
            .clone()
            .with_seed(rng::derive_seed(cfg.attack.seed, "eval-attack", chunk_no as u64));
        let adv = attacks::attack(net, &x, &y, &a, BnMode::Running)?;
        robust += hits(net.predict(&adv.x_adv)?.argmax_rows());

        let state = bounds::ibp_bounds(net, &x, &y, cfg.eps, BoundOptions::default())?;
        cert += bounds::min_lower_bounds(&state.lower, &y).iter().filter(|&&m| m >= 0.0).count();
        let tape = Tape::new();
        let ce = tape.constant(state.lower).neg().softmax_cross_entropy(&y)?;
        ibp_sum += ce.value().sum();
    }
    let nf = n as f64;
    Ok(EvalMetrics {
        clean_acc: clean as f64 / nf,
        pgd_acc: robust as f64 / nf,
        ibp_cert_acc: cert as f64 / nf,
        ibp_loss: ibp_sum / nf,
        forwabs_gap,
    })
}
