//! Training losses: adversarial, IBP, the expressive combinations (MTL-IBP,
//! Exp-IBP, CC-IBP, SABR) and the ForwAbs-regularised adversarial loss.
//!
//! The attack runs off the tape; its output enters the loss as a constant
//! input. Cross-entropies are batch means.

use serde::{Deserialize, Serialize};

use crate::attacks::{self, AdversarialBatch, AttackConfig};
use crate::bounds::{self, BoundOptions, BoundStats};
use crate::error::{ConfigError, Error, Result};
use crate::network::{logit_differences_graph, BnMode, BnStats, Layer, Network, ParamVars};
use crate::tensor::{Tape, Tensor, Var};

/// Floor applied to component losses before taking logs.
pub const LOG_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossFamily {
    Adversarial,
    Ibp,
    MtlIbp,
    ExpIbp,
    CcIbp,
    Sabr,
    Forwabs,
}

impl LossFamily {
    pub const EXPRESSIVE: [LossFamily; 4] = [LossFamily::MtlIbp, LossFamily::ExpIbp, LossFamily::CcIbp, LossFamily::Sabr];

    pub fn name(self) -> &'static str {
        match self {
            LossFamily::Adversarial => "adversarial",
            LossFamily::Ibp => "ibp",
            LossFamily::MtlIbp => "mtl-ibp",
            LossFamily::ExpIbp => "exp-ibp",
            LossFamily::CcIbp => "cc-ibp",
            LossFamily::Sabr => "sabr",
            LossFamily::Forwabs => "forwabs",
        }
    }
}

impl std::str::FromStr for LossFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            LossFamily::Adversarial,
            LossFamily::Ibp,
            LossFamily::MtlIbp,
            LossFamily::ExpIbp,
            LossFamily::CcIbp,
            LossFamily::Sabr,
            LossFamily::Forwabs,
        ]
        .into_iter()
        .find(|f| f.name() == s)
        .ok_or_else(|| {
            Error::Config(ConfigError::Invalid {
                field: "loss.family".into(),
                message: format!("unknown loss family `{s}`"),
            })
        })
    }
}

impl std::fmt::Display for LossFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub family: LossFamily,
    /// Over-approximation coefficient in `[0, 1]`.
    pub alpha: f64,
    /// ForwAbs coefficient.
    pub lambda: f64,
    /// Optional l1 penalty on affine and conv weights.
    pub l1: f64,
    pub attack: AttackConfig,
    /// Radius for IBP and ForwAbs; may lag `attack.eps` during ramp-up.
    pub bounding_eps: f64,
}

impl LossSpec {
    pub fn new(family: LossFamily, attack: AttackConfig) -> Self {
        LossSpec {
            family,
            alpha: 0.5,
            lambda: 0.0,
            l1: 0.0,
            bounding_eps: attack.eps,
            attack,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config(ConfigError::Invalid {
                field: format!("loss.{field}"),
                message,
            }))
        };
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha", format!("must be in [0,1], got {}", self.alpha));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda", format!("must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.l1 >= 0.0) || !self.l1.is_finite() {
            return bad("l1", format!("must be finite and >= 0, got {}", self.l1));
        }
        if !(self.bounding_eps >= 0.0) || !self.bounding_eps.is_finite() {
            return bad("bounding-eps", format!("must be finite and >= 0, got {}", self.bounding_eps));
        }
        self.attack.validate()
    }

    /// Whether the loss reads `x_adv`. Endpoints that reduce to pure IBP skip
    /// the attack.
    pub fn needs_attack(&self) -> bool {
        match self.family {
            LossFamily::Ibp => false,
            LossFamily::Adversarial | LossFamily::Forwabs => true,
            LossFamily::MtlIbp | LossFamily::ExpIbp | LossFamily::CcIbp | LossFamily::Sabr => self.alpha < 1.0,
        }
    }

    /// Whether the loss propagates interval bounds.
    pub fn needs_bounds(&self) -> bool {
        match self.family {
            LossFamily::Adversarial | LossFamily::Forwabs => false,
            LossFamily::Ibp => true,
            LossFamily::MtlIbp | LossFamily::ExpIbp | LossFamily::CcIbp => self.alpha > 0.0,
            LossFamily::Sabr => true,
        }
    }
}

/// Scalar loss with its pre-combination components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub adversarial: Option<f64>,
    pub ibp: Option<f64>,
    pub forwabs: Option<f64>,
}

impl std::fmt::Display for LossValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "total={}", self.total)?;
        for (name, v) in [("adversarial", self.adversarial), ("ibp", self.ibp), ("forwabs", self.forwabs)] {
            if let Some(v) = v {
                write!(f, " {name}={v}")?;
            }
        }
        Ok(())
    }
}

pub struct LossGraph<'t> {
    pub total: Var<'t>,
    pub value: LossValue,
    /// Batch statistics from the training-mode forward pass, if one ran.
    pub bn_stats: Vec<BnStats>,
    /// Logits at `x_adv`, when the adversarial forward ran.
    pub adv_logits: Option<Tensor>,
}

/// `(1 - alpha) a + alpha b`.
pub fn mtl_combine(adv: f64, ibp: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * adv + alpha * ibp
}

/// `adv^(1 - alpha) ibp^alpha`, evaluated in log space.
pub fn exp_combine(adv: f64, ibp: f64, alpha: f64) -> f64 {
    if alpha == 0.0 {
        return adv;
    }
    if alpha == 1.0 {
        return ibp;
    }
    exp_combine_log(adv.max(LOG_FLOOR).ln(), ibp.max(LOG_FLOOR).ln(), alpha)
}

/// Exp-IBP from log component losses, so that `ln L_IBP` may exceed the f64
/// range of `L_IBP` itself.
pub fn exp_combine_log(log_adv: f64, log_ibp: f64, alpha: f64) -> f64 {
    if alpha == 0.0 {
        return log_adv.exp();
    }
    if alpha == 1.0 {
        return log_ibp.exp();
    }
    ((1.0 - alpha) * log_adv + alpha * log_ibp).exp()
}

/// SABR box center: `x_adv` projected onto `B_{(1-alpha) eps}(x)`, or `x_adv`
/// itself for attacks that do not project.
pub fn sabr_center(x: &Tensor, x_adv: &Tensor, eps: f64, alpha: f64, project: bool) -> Result<Tensor> {
    if !project {
        return Ok(x_adv.clone());
    }
    let r = (1.0 - alpha) * eps;
    x_adv.zip_with(x, |a, c| a.clamp(c - r, c + r))
}

fn mean_ce<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    Ok(logits.softmax_cross_entropy(labels)?.mean())
}

fn l1_penalty<'t>(net: &Network, params: &ParamVars<'t>) -> Option<Var<'t>> {
    let mut acc: Option<Var<'t>> = None;
    for (i, layer) in net.layers().iter().enumerate() {
        if matches!(layer, Layer::Affine(_) | Layer::Conv2d(_)) {
            let s = params.layer(i)[0].abs().sum();
            acc = Some(match acc {
                None => s,
                Some(a) => a.add(s).expect("scalars"),
            });
        }
    }
    acc
}

/// Builds the loss on `params`' tape.
///
/// `bn` is the BatchNorm mode of the forward pass at `x_adv`. With
/// [`BnMode::Batch`] the bounds reuse that pass's statistics as constants (the
/// clean batch's when no attack is needed); otherwise they use the same
/// statistics as the forward pass.
pub fn loss_graph<'t>(
    net: &Network,
    params: &ParamVars<'t>,
    x: &Tensor,
    labels: &[usize],
    spec: &LossSpec,
    adv: Option<&AdversarialBatch>,
    bn: BnMode<'_>,
) -> Result<LossGraph<'t>> {
    spec.validate()?;
    let tape: &'t Tape = params
        .flat()
        .first()
        .map(|v| v.tape())
        .ok_or_else(|| Error::InvalidNetwork("network has no parameters".into()))?;
    let alpha = spec.alpha;
    let eps = spec.bounding_eps;

    let mut bn_stats = Vec::new();
    let mut adv_logits = None;
    let mut adv_logit_var = None;
    if spec.needs_attack() {
        let adv = adv.ok_or_else(|| Error::Domain {
            op: "loss",
            detail: format!("{} needs an adversarial batch", spec.family),
        })?;
        let trace = net.forward_graph(params, tape.constant(adv.x_adv.clone()), bn)?;
        adv_logits = Some((*trace.logits.value()).clone());
        adv_logit_var = Some(trace.logits);
        bn_stats = trace.bn_stats;
    } else if matches!(bn, BnMode::Batch) && net.has_batchnorm() {
        let trace = net.forward_graph(params, tape.constant(x.clone()), bn)?;
        bn_stats = trace.bn_stats;
    }
    let stats = match bn {
        BnMode::Batch => BoundStats::Fixed(&bn_stats),
        BnMode::Running => BoundStats::Running,
        BnMode::Fixed(s) => BoundStats::Fixed(s),
    };
    let opts = BoundOptions {
        stats,
        input_domain: None,
    };

    let l_adv = adv_logit_var.map(|z| mean_ce(z, labels)).transpose()?;
    let ibp_over = |center: &Tensor, radius: f64| -> Result<Var<'t>> {
        let g = bounds::ibp_graph(net, params, center, labels, radius, opts)?;
        Ok(g.lower)
    };
    let ibp_loss = |lower: Var<'t>| mean_ce(lower.neg(), labels);

    let mut value = LossValue {
        adversarial: l_adv.map(|v| v.item()),
        ..Default::default()
    };
    let total = match spec.family {
        LossFamily::Adversarial => l_adv.expect("attack ran"),
        LossFamily::Ibp => {
            let l = ibp_loss(ibp_over(x, eps)?)?;
            value.ibp = Some(l.item());
            l
        }
        LossFamily::MtlIbp | LossFamily::ExpIbp if alpha == 0.0 => l_adv.expect("attack ran"),
        LossFamily::MtlIbp | LossFamily::ExpIbp if alpha == 1.0 => {
            let l = ibp_loss(ibp_over(x, eps)?)?;
            value.ibp = Some(l.item());
            l
        }
        LossFamily::MtlIbp => {
            let li = ibp_loss(ibp_over(x, eps)?)?;
            value.ibp = Some(li.item());
            l_adv.expect("attack ran").scale(1.0 - alpha).add(li.scale(alpha))?
        }
        LossFamily::ExpIbp => {
            let li = ibp_loss(ibp_over(x, eps)?)?;
            value.ibp = Some(li.item());
            let la = l_adv.expect("attack ran");
            let log_a = la.clamp(LOG_FLOOR, f64::INFINITY).log()?;
            let log_i = li.clamp(LOG_FLOOR, f64::INFINITY).log()?;
            log_a.scale(1.0 - alpha).add(log_i.scale(alpha))?.exp()
        }
        LossFamily::CcIbp => {
            if alpha == 0.0 {
                l_adv.expect("attack ran")
            } else {
                let lower = ibp_over(x, eps)?;
                value.ibp = Some(ibp_loss(lower)?.item());
                if alpha == 1.0 {
                    ibp_loss(lower)?
                } else {
                    let z = logit_differences_graph(adv_logit_var.expect("attack ran"), labels)?;
                    let mix = z.scale(1.0 - alpha).add(lower.scale(alpha))?;
                    ibp_loss(mix)?
                }
            }
        }
        LossFamily::Sabr => {
            let l = if alpha == 1.0 {
                ibp_loss(ibp_over(x, eps)?)?
            } else {
                let adv = adv.expect("checked above");
                let center = sabr_center(x, &adv.x_adv, eps, alpha, spec.attack.projects())?;
                ibp_loss(ibp_over(&center, alpha * eps)?)?
            };
            value.ibp = Some(l.item());
            l
        }
        LossFamily::Forwabs => {
            let la = l_adv.expect("attack ran");
            if spec.lambda == 0.0 {
                la
            } else {
                let gap = bounds::forwabs_graph(net, params, eps, stats)?.total;
                value.forwabs = Some(gap.item());
                la.add(gap.scale(spec.lambda))?
            }
        }
    };
    let total = match (spec.l1 > 0.0).then(|| l1_penalty(net, params)).flatten() {
        Some(p) => total.add(p.scale(spec.l1))?,
        None => total,
    };
    value.total = total.item();
    if !value.total.is_finite() {
        return Err(Error::NonFinite {
            context: format!("{} loss ({value})", spec.family),
        });
    }
    Ok(LossGraph {
        total,
        value,
        bn_stats,
        adv_logits,
    })
}

/// Runs the attack for `spec` if needed and evaluates the loss without
/// gradients, using running BatchNorm statistics.
pub fn loss_value(net: &Network, x: &Tensor, labels: &[usize], spec: &LossSpec) -> Result<LossValue> {
    let adv = if spec.needs_attack() {
        Some(attacks::attack(net, x, labels, &spec.attack, BnMode::Running)?)
    } else {
        None
    };
    loss_value_at(net, x, labels, spec, adv.as_ref())
}

/// Like [`loss_value`] with a precomputed adversarial batch.
pub fn loss_value_at(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    spec: &LossSpec,
    adv: Option<&AdversarialBatch>,
) -> Result<LossValue> {
    let tape = Tape::new();
    let params = net.bind(&tape, false);
    Ok(loss_graph(net, &params, x, labels, spec, adv, BnMode::Running)?.value)
}

/// Cross-entropy at `x_adv`.
pub fn adversarial_loss(net: &Network, x: &Tensor, labels: &[usize], spec: &LossSpec) -> Result<LossValue> {
    let spec = LossSpec {
        family: LossFamily::Adversarial,
        ..spec.clone()
    };
    loss_value(net, x, labels, &spec)
}

/// Cross-entropy of the negated IBP logit-difference lower bounds over
/// `B_eps(x)`.
pub fn ibp_loss(net: &Network, x: &Tensor, labels: &[usize], eps: f64) -> Result<LossValue> {
    let spec = LossSpec {
        bounding_eps: eps,
        ..LossSpec::new(LossFamily::Ibp, AttackConfig::fgsm(eps))
    };
    loss_value(net, x, labels, &spec)
}
