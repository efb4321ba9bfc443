//! Training loop, schedules, optimisers, evaluation and diagnostics.

mod eval;
mod metrics;
mod optim;
mod probe;
mod schedule;
mod toy;

pub use eval::{evaluate, EvalConfig, EvalMetrics};
pub use metrics::{metrics_csv, read_metrics_csv, write_metrics_csv, EpochMetrics, METRICS_HEADER};
pub use optim::{clip_grad_norm, grad_norm, Optimizer, OptimizerKind};
pub use probe::{co_probe, CoThresholds, CoVerdict};
pub use schedule::{cyclic_lr, smoothed_ramp, ScheduleKind, ScheduleState};
pub use toy::{toy_closed_form, toy_csv, toy_sweep, write_toy_csv, ToyRow, TOY_EPS, TOY_LABEL, TOY_X0, TOY_X_ADV};

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attacks;
use crate::data::Dataset;
use crate::error::{ConfigError, Error, Result};
use crate::losses::{loss_graph, LossSpec};
use crate::network::{BnMode, Network};
use crate::rng;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainPlan {
    pub schedule: ScheduleKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Peak (cyclic) or initial (long) learning rate.
    pub lr_peak: f64,
    /// Cyclic only: where in training the learning rate peaks.
    pub peak_fraction: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    /// Final bounding radius.
    pub eps_target: f64,
    /// Epochs over which the bounding radius ramps up (0: none).
    pub eps_ramp_epochs: f64,
    /// Epochs over which the regularisation coefficient ramps up (0: none).
    pub coef_ramp_epochs: f64,
    /// Long only: epochs after which the learning rate is multiplied by
    /// `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    /// Ramp the attack radius along with the bounding radius.
    pub ramp_attack_eps: bool,
    pub seed: u64,
}

impl TrainPlan {
    /// SGD, momentum 0.9, weight decay 5e-4, no clipping or ramps.
    pub fn cyclic(epochs: usize, lr_peak: f64, eps_target: f64) -> Self {
        TrainPlan {
            schedule: ScheduleKind::Cyclic,
            epochs,
            batch_size: 128,
            optimizer: OptimizerKind::Sgd,
            lr_peak,
            peak_fraction: 0.5,
            momentum: 0.9,
            weight_decay: 5e-4,
            grad_clip: None,
            eps_target,
            eps_ramp_epochs: 0.0,
            coef_ramp_epochs: 0.0,
            lr_decay_epochs: Vec::new(),
            lr_decay_factor: 0.2,
            ramp_attack_eps: false,
            seed: 0,
        }
    }

    /// Adam at 5e-4, decays by 0.2 at 75% and 87.5% of training, gradient
    /// clipping at 10 and the radius ramped over the first half.
    pub fn long(epochs: usize, eps_target: f64) -> Self {
        TrainPlan {
            schedule: ScheduleKind::Long,
            optimizer: OptimizerKind::Adam,
            lr_peak: 5e-4,
            momentum: 0.0,
            weight_decay: 0.0,
            grad_clip: Some(10.0),
            eps_ramp_epochs: epochs as f64 / 2.0,
            lr_decay_epochs: Self::default_decays(epochs),
            ..Self::cyclic(epochs, 5e-4, eps_target)
        }
    }

    pub fn default_decays(epochs: usize) -> Vec<usize> {
        let at = |f: f64| (f * epochs as f64).round() as usize;
        vec![at(0.75), at(0.875)]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config(ConfigError::Invalid {
                field: format!("train.{field}"),
                message,
            }))
        };
        if self.batch_size == 0 {
            return bad("batch-size", "must be >= 1".into());
        }
        if !(self.lr_peak >= 0.0) || !self.lr_peak.is_finite() {
            return bad("lr-peak", format!("must be finite and >= 0, got {}", self.lr_peak));
        }
        if !(0.0..=1.0).contains(&self.peak_fraction) {
            return bad("peak-fraction", format!("must lie in [0, 1], got {}", self.peak_fraction));
        }
        if !(self.eps_target >= 0.0) || !self.eps_target.is_finite() {
            return bad("eps-target", format!("must be finite and >= 0, got {}", self.eps_target));
        }
        if !(self.eps_ramp_epochs >= 0.0) {
            return bad("eps-ramp-epochs", "must be >= 0".into());
        }
        if !(self.coef_ramp_epochs >= 0.0) {
            return bad("coef-ramp-epochs", "must be >= 0".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad-clip", format!("must be > 0, got {c}"));
            }
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return bad("momentum", format!("must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight-decay", "must be >= 0".into());
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }

    /// Schedule values at global step `step` (0-based).
    pub fn state(&self, step: usize, steps_per_epoch: usize) -> ScheduleState {
        let spe = steps_per_epoch.max(1);
        let epoch = step / spe;
        let total = (self.epochs * spe).max(1);
        let lr = match self.schedule {
            ScheduleKind::Cyclic => cyclic_lr((step as f64 + 0.5) / total as f64, self.lr_peak, self.peak_fraction),
            ScheduleKind::Long => {
                let decays = self.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
                self.lr_peak * self.lr_decay_factor.powi(decays as i32)
            }
        };
        let ramp_steps = |epochs: f64| (epochs * spe as f64).ceil() as usize;
        let eps_frac = smoothed_ramp(schedule::ramp_progress(step, ramp_steps(self.eps_ramp_epochs)));
        let coef_fraction = smoothed_ramp(schedule::ramp_progress(step, ramp_steps(self.coef_ramp_epochs)));
        ScheduleState {
            step,
            epoch,
            lr,
            bounding_eps: if eps_frac >= 1.0 { self.eps_target } else { self.eps_target * eps_frac },
            coef_fraction,
        }
    }
}

/// Per-step loss spec: bounding radius and coefficients from the schedule,
/// attack seed from the step.
fn step_spec(base: &LossSpec, plan: &TrainPlan, state: &ScheduleState) -> LossSpec {
    let mut spec = base.clone();
    spec.bounding_eps = state.bounding_eps;
    spec.lambda = base.lambda * state.coef_fraction;
    spec.l1 = base.l1 * state.coef_fraction;
    spec.attack.seed = rng::derive_seed(plan.seed, "train-attack", state.step as u64);
    if plan.ramp_attack_eps && plan.eps_target > 0.0 {
        spec.attack.eps = base.attack.eps * state.bounding_eps / plan.eps_target;
    }
    spec
}

/// Trains `net` in place on the training part of `data` and evaluates on the
/// validation part after every epoch. `observer` sees each epoch's metrics
/// as they are produced.
pub fn train(
    net: &mut Network,
    data: &Dataset,
    plan: &TrainPlan,
    spec: &LossSpec,
    eval: &EvalConfig,
    mut observer: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    plan.validate()?;
    spec.validate()?;
    let train_set = data.train_part();
    let val_set = data.val_part();
    let spe = plan.steps_per_epoch(train_set.len());
    let mut opt = Optimizer::new(plan.optimizer, plan.momentum, plan.weight_decay);
    let mut history = Vec::with_capacity(plan.epochs);
    let mut step = 0;
    for epoch in 0..plan.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::rng(plan.seed, "shuffle", epoch as u64));
        let (mut adv_correct, mut adv_seen) = (0usize, 0usize);
        let mut state = plan.state(step, spe);
        for (batch, idx) in order.chunks(plan.batch_size).enumerate() {
            state = plan.state(step, spe);
            let (x, y) = train_set.batch(idx);
            let s = step_spec(spec, plan, &state);
            let adv = if s.needs_attack() {
                Some(attacks::attack(net, &x, &y, &s.attack, BnMode::Batch)?)
            } else {
                None
            };
            let tape = Tape::new();
            let params = net.bind(&tape, true);
            let lg = loss_graph(net, &params, &x, &y, &s, adv.as_ref(), BnMode::Batch).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFiniteLoss {
                    epoch,
                    batch,
                    components: context,
                },
                other => other,
            })?;
            if let Some(logits) = &lg.adv_logits {
                adv_correct += logits.argmax_rows().iter().zip(&y).filter(|(p, t)| p == t).count();
                adv_seen += y.len();
            }
            let grads = tape.backward(lg.total)?;
            let mut g: Vec<Tensor> = params.flat().into_iter().map(|v| grads.wrt(v)).collect();
            if g.iter().any(|t| !t.all_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch,
                    components: format!("non-finite gradient ({})", lg.value),
                });
            }
            if let Some(c) = plan.grad_clip {
                clip_grad_norm(&mut g, c);
            }
            let bn_stats = lg.bn_stats;
            drop(params);
            opt.step(net.params_mut(), &g, state.lr);
            net.update_running_stats(&bn_stats);
            step += 1;
        }
        let ev = evaluate(net, &val_set, eval)?;
        let m = EpochMetrics {
            epoch: epoch + 1,
            clean_acc: ev.clean_acc,
            attack_train_acc: if adv_seen > 0 {
                adv_correct as f64 / adv_seen as f64
            } else {
                f64::NAN
            },
            pgd_acc: ev.pgd_acc,
            ibp_cert_acc: ev.ibp_cert_acc,
            ibp_loss: ev.ibp_loss,
            forwabs_gap: ev.forwabs_gap,
            lr: state.lr,
            eps_bound: state.bounding_eps,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        observer(&m);
        history.push(m);
    }
    Ok(history)
}
