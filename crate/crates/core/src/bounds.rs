//! Interval bound propagation (IBP) and the ForwAbs gap.
//!
//! Boxes are carried in center/radius form: an affine map sends `(c, r)` to
//! `(W c + b, |W| r)`, which is the usual `½W(l+u) ± ½|W|(u-l) + b` rule,
//! and a monotone activation maps the endpoints. The final affine layer is
//! merged with the logit-difference operator before bounding, so the lower
//! bound on `z_i = f_y - f_i` comes from the single matrix `W_y - W_i`.

use crate::error::{Error, Result};
use crate::network::{batchnorm_constant, BnMode, BnStats, Layer, Network, ParamVars};
use crate::tensor::{Tape, Tensor, Var};

/// BatchNorm statistics to freeze while bounding.
#[derive(Clone, Copy, Debug, Default)]
pub enum BoundStats<'a> {
    #[default]
    Running,
    /// One entry per BatchNorm layer, usually the statistics of the batch the
    /// attack was run on.
    Fixed(&'a [BnStats]),
}

impl<'a> BoundStats<'a> {
    fn as_mode(self) -> BnMode<'a> {
        match self {
            BoundStats::Running => BnMode::Running,
            BoundStats::Fixed(s) => BnMode::Fixed(s),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BoundOptions<'a> {
    pub stats: BoundStats<'a>,
    /// Intersect the input box with `[lo, hi]` before propagating. Off by
    /// default: the pure l-infinity ball is bounded.
    pub input_domain: Option<(f64, f64)>,
}

/// Bounds after one affine-like stage (affine, conv or batchnorm).
#[derive(Clone, Debug, PartialEq)]
pub struct StageBounds {
    /// Index into [`Network::layers`].
    pub layer: usize,
    pub lower: Tensor,
    pub upper: Tensor,
}

#[derive(Clone, Debug)]
pub struct BoundsState {
    /// Per-stage bounds; the last entry is the final affine layer before
    /// elision.
    pub stages: Vec<StageBounds>,
    /// `[B, k]` lower bounds on logit differences; column `y` is zero.
    pub lower: Tensor,
    pub eps: f64,
}

/// Taped IBP result; `lower` participates in gradients.
pub struct IbpGraph<'t> {
    pub lower: Var<'t>,
    pub stages: Vec<StageBounds>,
}

fn check_finite(t: &Tensor, what: &str, layer: usize) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: format!("{what} at layer {layer}"),
        })
    }
}

fn input_box<'t>(tape: &'t Tape, x: &Tensor, eps: f64, domain: Option<(f64, f64)>) -> (Var<'t>, Var<'t>) {
    match domain {
        None => (tape.constant(x.clone()), tape.constant(Tensor::full(x.shape(), eps))),
        Some((lo, hi)) => {
            let l = x.map(|v| (v - eps).max(lo));
            let u = x.map(|v| (v + eps).min(hi));
            let c = l.zip_with(&u, |a, b| 0.5 * (a + b)).unwrap();
            let r = l.zip_with(&u, |a, b| 0.5 * (b - a).max(0.0)).unwrap();
            (tape.constant(c), tape.constant(r))
        }
    }
}

/// IBP over `B_eps(x)` on the tape, for labels `labels`.
pub fn ibp_graph<'t>(
    net: &Network,
    params: &ParamVars<'t>,
    x: &Tensor,
    labels: &[usize],
    eps: f64,
    opts: BoundOptions<'_>,
) -> Result<IbpGraph<'t>> {
    if !(eps >= 0.0) {
        return Err(Error::Domain {
            op: "ibp_bounds",
            detail: format!("radius must be >= 0, got {eps}"),
        });
    }
    net.check_input(x)?;
    if labels.len() != x.rows() {
        return Err(Error::shape("ibp_bounds labels", &[labels.len()], x.shape()));
    }
    let tape = params
        .flat()
        .first()
        .map(|v| v.tape())
        .ok_or_else(|| Error::InvalidNetwork("network has no parameters".into()))?;
    let (mut c, mut r) = input_box(tape, x, eps, opts.input_domain);
    let mut stages = Vec::new();
    let mut bn_index = 0;
    let last = net.layers().len() - 1;
    for (i, layer) in net.layers().iter().enumerate() {
        let p = params.layer(i);
        match layer {
            Layer::Affine(_) if i == last => {
                let wv = p[0];
                let c_out = c.linear(wv, Some(p[1]))?;
                let r_out = r.linear(wv.abs(), None)?;
                let (lo, hi) = (c_out.sub(r_out)?, c_out.add(r_out)?);
                stages.push(StageBounds {
                    layer: i,
                    lower: (*lo.value()).clone(),
                    upper: (*hi.value()).clone(),
                });

                let k = net.num_classes();
                let w_diff = wv.label_row_diff(labels)?;
                let b_rows = p[1]
                    .reshape(&[1, k])?
                    .add(tape.constant(Tensor::zeros(&[labels.len(), k])))?;
                let b_diff = b_rows.gather_labels(labels)?.sub(b_rows)?;
                let lower = w_diff
                    .bmv(c)?
                    .add(b_diff)?
                    .sub(w_diff.abs().bmv(r)?)?;
                check_finite(&lower.value(), "IBP logit-difference bound", i)?;
                return Ok(IbpGraph { lower, stages });
            }
            Layer::Affine(_) => {
                c = c.linear(p[0], Some(p[1]))?;
                r = r.linear(p[0].abs(), None)?;
            }
            Layer::Conv2d(conv) => {
                c = c.conv2d(p[0], Some(p[1]), conv.spec)?;
                r = r.conv2d(p[0].abs(), None, conv.spec)?;
            }
            Layer::BatchNorm(bn) => {
                let (center, scale) = batchnorm_constant(bn, c, p[0], p[1], opts.stats.as_mode(), bn_index)?;
                bn_index += 1;
                c = center;
                r = r.mul(scale.abs())?;
            }
            Layer::Relu => {
                let lo = c.sub(r)?.relu();
                let hi = c.add(r)?.relu();
                c = lo.add(hi)?.scale(0.5);
                r = hi.sub(lo)?.scale(0.5);
                continue;
            }
            Layer::Flatten => {
                c = c.flatten_batch()?;
                r = r.flatten_batch()?;
                continue;
            }
        }
        let (cv, rv) = (c.value(), r.value());
        check_finite(&cv, "IBP center", i)?;
        check_finite(&rv, "IBP radius", i)?;
        stages.push(StageBounds {
            layer: i,
            lower: cv.zip_with(&rv, |a, b| a - b)?,
            upper: cv.zip_with(&rv, |a, b| a + b)?,
        });
    }
    Err(Error::InvalidNetwork("final layer must be affine".into()))
}

/// Interval bounds for every sample of `x` (`[B, ...]`) over `B_eps(x)`.
pub fn ibp_bounds(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    eps: f64,
    opts: BoundOptions<'_>,
) -> Result<BoundsState> {
    let tape = Tape::new();
    let params = net.bind(&tape, false);
    let g = ibp_graph(net, &params, x, labels, eps, opts)?;
    let lower = (*g.lower.value()).clone();
    Ok(BoundsState {
        stages: g.stages,
        lower,
        eps,
    })
}

/// Final affine layer merged with the logit differences for label `y`:
/// row `i` is `W_y - W_i`, entry `i` of the bias is `b_y - b_i`.
pub fn elide_last_layer(net: &Network, y: usize) -> Result<(Tensor, Tensor)> {
    let Some(Layer::Affine(a)) = net.layers().last() else {
        return Err(Error::InvalidNetwork("final layer must be affine".into()));
    };
    let k = net.num_classes();
    if y >= k {
        return Err(Error::LabelOutOfRange {
            label: y,
            num_classes: k,
        });
    }
    let h = a.weight.shape()[1];
    let wy = a.weight.row(y).to_vec();
    let mut w = Vec::with_capacity(k * h);
    for i in 0..k {
        w.extend(wy.iter().zip(a.weight.row(i)).map(|(p, q)| p - q));
    }
    let by = a.bias.data()[y];
    let b = a.bias.data().iter().map(|bi| by - bi).collect();
    Ok((Tensor::from_parts(vec![k, h], w), Tensor::vector(b)))
}

/// Per-sample certification: every logit-difference lower bound `>= 0`.
pub fn ibp_certified(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    eps: f64,
    opts: BoundOptions<'_>,
) -> Result<Vec<bool>> {
    let state = ibp_bounds(net, x, labels, eps, opts)?;
    Ok(min_lower_bounds(&state.lower, labels)
        .into_iter()
        .map(|m| m >= 0.0)
        .collect())
}

/// Smallest lower bound over `i != y` for each row (`+inf` when k = 1).
pub fn min_lower_bounds(lower: &Tensor, labels: &[usize]) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(b, &y)| {
            lower
                .row(b)
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != y)
                .fold(f64::INFINITY, |m, (_, &v)| m.min(v))
        })
        .collect()
}

/// Taped ForwAbs pass: `δ̄¹ = 2ε|W¹|1`, `δ̄ᵏ = |Wᵏ|δ̄ᵏ⁻¹`.
pub struct ForwAbsGraph<'t> {
    /// `1ᵀ δ̄ⁿ` as a scalar var.
    pub total: Var<'t>,
    /// `δ̄` after each affine-like stage.
    pub stages: Vec<Tensor>,
}

/// Per-stage ForwAbs gaps and their final sum.
#[derive(Clone, Debug)]
pub struct ForwAbsGap {
    pub stages: Vec<Tensor>,
    pub total: f64,
}

/// One forward pass through the network with every weight replaced by its
/// absolute value and biases dropped, starting from `2 eps` in every input
/// coordinate. ReLUs pass the gap through unchanged and BatchNorm contributes
/// its frozen scale `|gamma| / sqrt(var + eps)`.
pub fn forwabs_graph<'t>(
    net: &Network,
    params: &ParamVars<'t>,
    eps: f64,
    stats: BoundStats<'_>,
) -> Result<ForwAbsGraph<'t>> {
    if !(eps >= 0.0) {
        return Err(Error::Domain {
            op: "forwabs_gap",
            detail: format!("radius must be >= 0, got {eps}"),
        });
    }
    let tape = params
        .flat()
        .first()
        .map(|v| v.tape())
        .ok_or_else(|| Error::InvalidNetwork("network has no parameters".into()))?;
    let mut shape = vec![1];
    shape.extend_from_slice(net.input_shape());
    let mut gap = tape.constant(Tensor::full(&shape, 2.0 * eps));
    let mut stages = Vec::new();
    let mut bn_index = 0;
    for (i, layer) in net.layers().iter().enumerate() {
        let p = params.layer(i);
        gap = match layer {
            Layer::Affine(_) => gap.linear(p[0].abs(), None)?,
            Layer::Conv2d(conv) => gap.conv2d(p[0].abs(), None, conv.spec)?,
            Layer::BatchNorm(bn) => {
                // The shift cancels in a gap; only the scale matters.
                let (_, scale) = batchnorm_constant(bn, gap, p[0], p[1], stats.as_mode(), bn_index)?;
                bn_index += 1;
                gap.mul(scale.abs())?
            }
            Layer::Relu => continue,
            Layer::Flatten => {
                gap = gap.flatten_batch()?;
                continue;
            }
        };
        let v = gap.value();
        check_finite(&v, "ForwAbs gap", i)?;
        stages.push((*v).clone());
    }
    Ok(ForwAbsGraph {
        total: gap.sum(),
        stages,
    })
}

pub fn forwabs_gap(net: &Network, eps: f64, stats: BoundStats<'_>) -> Result<ForwAbsGap> {
    let tape = Tape::new();
    let params = net.bind(&tape, false);
    let g = forwabs_graph(net, &params, eps, stats)?;
    Ok(ForwAbsGap {
        total: g.total.item(),
        stages: g.stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Affine, InitScheme, Mode};

    fn affine(out: usize, inp: usize, w: &[f64], b: &[f64]) -> Layer {
        Layer::Affine(Affine {
            weight: Tensor::matrix(out, inp, w.to_vec()).unwrap(),
            bias: Tensor::vector(b.to_vec()),
        })
    }

    #[test]
    fn single_affine_first_stage() {
        let net = Network::new(vec![1], vec![affine(1, 1, &[1.0], &[0.0])]).unwrap();
        let x = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let s = ibp_bounds(&net, &x, &[0], 1.0, BoundOptions::default()).unwrap();
        assert_eq!(s.stages[0].lower.data(), &[-1.0]);
        assert_eq!(s.stages[0].upper.data(), &[1.0]);
        // brute force over the two corners
        for xp in [-1.0, 1.0] {
            assert!(xp >= s.stages[0].lower.data()[0] && xp <= s.stages[0].upper.data()[0]);
        }
    }

    #[test]
    fn zero_radius_gives_exact_differences() {
        let mut net = Network::mlp(&[3, 5, 4], true).unwrap();
        net.init(InitScheme::Default, 2);
        let x = Tensor::matrix(2, 3, vec![0.1, -0.4, 0.9, 1.0, 0.0, -2.0]).unwrap();
        let labels = [1, 3];
        let logits = net.forward(&x, Mode::Eval).unwrap();
        let z = crate::network::logit_differences(&logits, &labels).unwrap();
        let s = ibp_bounds(&net, &x, &labels, 0.0, BoundOptions::default()).unwrap();
        for (a, b) in s.lower.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(s.lower.row(0)[1], 0.0);
        assert_eq!(s.lower.row(1)[3], 0.0);
    }

    #[test]
    fn elision_example() {
        let net = Network::new(vec![2], vec![affine(2, 2, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0])]).unwrap();
        let (w, b) = elide_last_layer(&net, 1).unwrap();
        assert_eq!(w.data(), &[-1.0, 1.0, 0.0, 0.0]);
        assert_eq!(b.data(), &[0.0, 0.0]);
        assert!(elide_last_layer(&net, 2).is_err());
    }

    #[test]
    fn forwabs_hand_example() {
        let net = Network::new(
            vec![2],
            vec![affine(1, 2, &[1.0, -1.0], &[0.0]), Layer::Relu, affine(1, 1, &[2.0], &[0.0])],
        )
        .unwrap();
        let g = forwabs_gap(&net, 0.1, BoundStats::Running).unwrap();
        assert!((g.stages[0].data()[0] - 0.4).abs() < 1e-15);
        assert!((g.stages[1].data()[0] - 0.8).abs() < 1e-15);
        assert!((g.total - 0.8).abs() < 1e-15);
        assert_eq!(forwabs_gap(&net, 0.0, BoundStats::Running).unwrap().total, 0.0);
    }

    #[test]
    fn certification_at_zero_radius_tracks_prediction() {
        let mut net = Network::mlp(&[2, 6, 3], true).unwrap();
        net.init(InitScheme::Default, 5);
        let x = Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap();
        let pred = net.predict(&x).unwrap().argmax_rows()[0];
        let wrong = (pred + 1) % 3;
        let opts = BoundOptions::default();
        assert_eq!(ibp_certified(&net, &x, &[pred], 0.0, opts).unwrap(), vec![true]);
        assert_eq!(ibp_certified(&net, &x, &[wrong], 0.0, opts).unwrap(), vec![false]);
    }

    #[test]
    fn negative_radius_rejected() {
        let net = Network::mlp(&[2, 2], true).unwrap();
        let x = Tensor::zeros(&[1, 2]);
        assert!(ibp_bounds(&net, &x, &[0], -1.0, BoundOptions::default()).is_err());
    }

    #[test]
    fn input_domain_clips_the_box() {
        let net = Network::new(vec![1], vec![affine(1, 1, &[1.0], &[0.0])]).unwrap();
        let x = Tensor::matrix(1, 1, vec![0.1]).unwrap();
        let opts = BoundOptions {
            input_domain: Some((0.0, 1.0)),
            ..Default::default()
        };
        let s = ibp_bounds(&net, &x, &[0], 0.3, opts).unwrap();
        assert!((s.stages[0].lower.data()[0] - 0.0).abs() < 1e-15);
        assert!((s.stages[0].upper.data()[0] - 0.4).abs() < 1e-15);
    }
}
