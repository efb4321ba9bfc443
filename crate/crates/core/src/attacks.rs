//! l-infinity attacks: FGSM, RS-FGSM, N-FGSM and PGD with restarts.
//!
//! All attacks maximise the summed cross-entropy of the batch. They are pure
//! functions of `(net, x, y, cfg)`; randomness comes from `cfg.seed` only.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{BnMode, Network};
use crate::rng;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Fgsm,
    RsFgsm,
    NFgsm,
    Pgd,
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::RsFgsm => "rs-fgsm",
            AttackKind::NFgsm => "n-fgsm",
            AttackKind::Pgd => "pgd",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub eps: f64,
    /// Defaults: `eps` for FGSM and N-FGSM, `1.25 eps` for RS-FGSM,
    /// `eps / 4` for PGD.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    #[serde(default = "one")]
    pub steps: usize,
    #[serde(default = "one")]
    pub restarts: usize,
    /// N-FGSM samples its start from `[-k eps, k eps]`.
    #[serde(default = "two")]
    pub noise_multiplier: f64,
    /// Clamp every iterate to `[0, 1]`.
    #[serde(default)]
    pub clip_input: bool,
    /// PGD only: start from a uniform point in the ball rather than `x`.
    #[serde(default = "yes")]
    pub random_start: bool,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}
fn two() -> f64 {
    2.0
}
fn yes() -> bool {
    true
}

impl AttackConfig {
    pub fn new(kind: AttackKind, eps: f64) -> Self {
        AttackConfig {
            kind,
            eps,
            step_size: None,
            steps: 1,
            restarts: 1,
            noise_multiplier: 2.0,
            clip_input: false,
            random_start: true,
            seed: 0,
        }
    }

    pub fn fgsm(eps: f64) -> Self {
        Self::new(AttackKind::Fgsm, eps)
    }

    pub fn pgd(eps: f64, steps: usize) -> Self {
        AttackConfig {
            steps,
            ..Self::new(AttackKind::Pgd, eps)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(match self.kind {
            AttackKind::Fgsm | AttackKind::NFgsm => self.eps,
            AttackKind::RsFgsm => 1.25 * self.eps,
            AttackKind::Pgd => self.eps / 4.0,
        })
    }

    /// Whether outputs are guaranteed to stay in `B_eps(x)`.
    pub fn projects(&self) -> bool {
        self.kind != AttackKind::NFgsm
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config(crate::error::ConfigError::Invalid {
                field: format!("attack.{field}"),
                message,
            }))
        };
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return bad("eps", format!("must be finite and >= 0, got {}", self.eps));
        }
        if self.steps < 1 {
            return bad("steps", "must be >= 1".into());
        }
        if self.restarts < 1 {
            return bad("restarts", "must be >= 1".into());
        }
        if self.kind != AttackKind::Pgd && self.steps != 1 {
            return bad("steps", format!("{} is a single-step attack", self.kind));
        }
        if let Some(s) = self.step_size {
            if !(s >= 0.0) || !s.is_finite() {
                return bad("step-size", format!("must be finite and >= 0, got {s}"));
            }
        }
        if !(self.noise_multiplier >= 0.0) {
            return bad("noise-multiplier", "must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AdversarialBatch {
    pub x_adv: Tensor,
    /// `||x_adv - x||_inf <= eps` per sample.
    pub in_ball: Vec<bool>,
}

/// Input gradient of the summed cross-entropy and the per-sample losses.
pub fn input_gradient(net: &Network, x: &Tensor, labels: &[usize], bn: BnMode<'_>) -> Result<(Tensor, Vec<f64>)> {
    let tape = Tape::new();
    let params = net.bind(&tape, false);
    let xv = tape.var(x.clone());
    let logits = net.forward_graph(&params, xv, bn)?.logits;
    let per_sample = logits.softmax_cross_entropy(labels)?;
    let grads = tape.backward(per_sample.sum())?;
    let losses = per_sample.value().data().to_vec();
    Ok((grads.wrt(xv), losses))
}

/// Per-sample cross-entropy at `x`.
pub fn per_sample_loss(net: &Network, x: &Tensor, labels: &[usize], bn: BnMode<'_>) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let params = net.bind(&tape, false);
    let logits = net.forward_graph(&params, tape.constant(x.clone()), bn)?.logits;
    let l = logits.softmax_cross_entropy(labels)?;
    let out = l.value().data().to_vec();
    Ok(out)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn clip(t: &mut Tensor, on: bool) {
    if on {
        t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
}

fn project(t: &mut Tensor, x: &Tensor, eps: f64) {
    for (v, &c) in t.data_mut().iter_mut().zip(x.data()) {
        *v = v.clamp(c - eps, c + eps);
    }
}

fn uniform_noise(x: &Tensor, radius: f64, seed: u64, index: u64) -> Tensor {
    let mut out = x.clone();
    if radius > 0.0 {
        let mut r = rng::rng(seed, "attack-noise", index);
        for v in out.data_mut() {
            *v += r.gen_range(-radius..=radius);
        }
    }
    out
}

fn signed_step(at: &Tensor, grad: &Tensor, step: f64) -> Tensor {
    at.zip_with(grad, |a, g| a + step * sign(g)).unwrap()
}

fn finish(x: &Tensor, x_adv: Tensor, eps: f64) -> AdversarialBatch {
    let d = x.row_len();
    let in_ball = x
        .data()
        .chunks(d.max(1))
        .zip(x_adv.data().chunks(d.max(1)))
        .map(|(a, b)| a.iter().zip(b).all(|(p, q)| (p - q).abs() <= eps + 1e-12))
        .collect();
    AdversarialBatch { x_adv, in_ball }
}

fn expect(cfg: &AttackConfig, kind: AttackKind) -> Result<()> {
    cfg.validate()?;
    if cfg.kind != kind {
        return Err(Error::Domain {
            op: "attack",
            detail: format!("expected a {kind} config, got {}", cfg.kind),
        });
    }
    Ok(())
}

/// `x + eps * sign(grad)`.
pub fn fgsm(net: &Network, x: &Tensor, labels: &[usize], cfg: &AttackConfig, bn: BnMode<'_>) -> Result<AdversarialBatch> {
    expect(cfg, AttackKind::Fgsm)?;
    let (g, _) = input_gradient(net, x, labels, bn)?;
    let mut x_adv = signed_step(x, &g, cfg.step());
    project(&mut x_adv, x, cfg.eps);
    clip(&mut x_adv, cfg.clip_input);
    Ok(finish(x, x_adv, cfg.eps))
}

/// FGSM from a uniform start in the ball, projected back afterwards.
pub fn rs_fgsm(net: &Network, x: &Tensor, labels: &[usize], cfg: &AttackConfig, bn: BnMode<'_>) -> Result<AdversarialBatch> {
    expect(cfg, AttackKind::RsFgsm)?;
    let mut start = uniform_noise(x, cfg.eps, cfg.seed, 0);
    clip(&mut start, cfg.clip_input);
    let (g, _) = input_gradient(net, &start, labels, bn)?;
    let mut x_adv = signed_step(&start, &g, cfg.step());
    project(&mut x_adv, x, cfg.eps);
    clip(&mut x_adv, cfg.clip_input);
    Ok(finish(x, x_adv, cfg.eps))
}

/// FGSM from `x + U[-k eps, k eps]` with no projection.
pub fn n_fgsm(net: &Network, x: &Tensor, labels: &[usize], cfg: &AttackConfig, bn: BnMode<'_>) -> Result<AdversarialBatch> {
    expect(cfg, AttackKind::NFgsm)?;
    let mut start = uniform_noise(x, cfg.noise_multiplier * cfg.eps, cfg.seed, 0);
    clip(&mut start, cfg.clip_input);
    let (g, _) = input_gradient(net, &start, labels, bn)?;
    let mut x_adv = signed_step(&start, &g, cfg.step());
    clip(&mut x_adv, cfg.clip_input);
    Ok(finish(x, x_adv, cfg.eps))
}

/// Projected sign-gradient ascent. Each restart's final iterate competes per
/// sample on loss; ties keep the earlier restart.
pub fn pgd(net: &Network, x: &Tensor, labels: &[usize], cfg: &AttackConfig, bn: BnMode<'_>) -> Result<AdversarialBatch> {
    expect(cfg, AttackKind::Pgd)?;
    let d = x.row_len();
    let mut best: Option<(Tensor, Vec<f64>)> = None;
    for restart in 0..cfg.restarts {
        let mut cur = if cfg.random_start {
            uniform_noise(x, cfg.eps, cfg.seed, restart as u64)
        } else {
            x.clone()
        };
        clip(&mut cur, cfg.clip_input);
        for _ in 0..cfg.steps {
            let (g, _) = input_gradient(net, &cur, labels, bn)?;
            cur = signed_step(&cur, &g, cfg.step());
            project(&mut cur, x, cfg.eps);
            clip(&mut cur, cfg.clip_input);
        }
        if cfg.restarts == 1 {
            return Ok(finish(x, cur, cfg.eps));
        }
        let loss = per_sample_loss(net, &cur, labels, bn)?;
        best = Some(match best {
            None => (cur, loss),
            Some((mut bx, mut bl)) => {
                for (i, (&l, b)) in loss.iter().zip(bl.iter_mut()).enumerate() {
                    if l > *b {
                        *b = l;
                        bx.data_mut()[i * d..(i + 1) * d].copy_from_slice(&cur.data()[i * d..(i + 1) * d]);
                    }
                }
                (bx, bl)
            }
        });
    }
    let (x_adv, _) = best.expect("restarts >= 1");
    Ok(finish(x, x_adv, cfg.eps))
}

/// Dispatches on `cfg.kind`.
pub fn attack(net: &Network, x: &Tensor, labels: &[usize], cfg: &AttackConfig, bn: BnMode<'_>) -> Result<AdversarialBatch> {
    match cfg.kind {
        AttackKind::Fgsm => fgsm(net, x, labels, cfg, bn),
        AttackKind::RsFgsm => rs_fgsm(net, x, labels, cfg, bn),
        AttackKind::NFgsm => n_fgsm(net, x, labels, cfg, bn),
        AttackKind::Pgd => pgd(net, x, labels, cfg, bn),
    }
}
