//! Layer stacks, parameter storage and forward evaluation.

mod checkpoint;
mod presets;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use presets::Preset;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Conv2dSpec, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    /// `[out_channels, in_channels, kh, kw]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub spec: Conv2dSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn running_stats(&self) -> BnStats {
        BnStats {
            mean: self.running_mean.clone(),
            var: self.running_var.clone(),
            count: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Layer {
    Affine(Affine),
    Conv2d(Conv2d),
    Relu,
    Flatten,
    #[serde(rename = "batchnorm")]
    BatchNorm(BatchNorm),
}

impl Layer {
    pub fn affine(out: usize, inp: usize) -> Self {
        Layer::Affine(Affine {
            weight: Tensor::zeros(&[out, inp]),
            bias: Tensor::zeros(&[out]),
        })
    }

    pub fn conv(out: usize, inp: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Layer::Conv2d(Conv2d {
            weight: Tensor::zeros(&[out, inp, kernel, kernel]),
            bias: Tensor::zeros(&[out]),
            spec: Conv2dSpec { stride, padding },
        })
    }

    pub fn batchnorm(channels: usize) -> Self {
        Layer::BatchNorm(BatchNorm::new(channels))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Affine(_) => "affine",
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
            Layer::BatchNorm(_) => "batchnorm",
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Affine(a) => vec![&a.weight, &a.bias],
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            Layer::BatchNorm(b) => vec![&b.gamma, &b.beta],
            Layer::Relu | Layer::Flatten => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Affine(a) => vec![&mut a.weight, &mut a.bias],
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            Layer::Relu | Layer::Flatten => Vec::new(),
        }
    }

    /// Per-sample output shape, or an error if `input` does not fit.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |why: String| Err(Error::InvalidNetwork(format!("{} layer: {why}", self.name())));
        match self {
            Layer::Affine(a) => {
                let ws = a.weight.shape();
                if ws.len() != 2 || a.bias.shape() != [ws[0]] {
                    return bad(format!("weight {ws:?} / bias {:?}", a.bias.shape()));
                }
                if input != [ws[1]] {
                    return bad(format!("expects input [{}], got {input:?}", ws[1]));
                }
                Ok(vec![ws[0]])
            }
            Layer::Conv2d(c) => {
                let ws = c.weight.shape();
                if ws.len() != 4 || c.bias.shape() != [ws[0]] || c.spec.stride == 0 {
                    return bad(format!("weight {ws:?} / bias {:?}", c.bias.shape()));
                }
                if input.len() != 3 || input[0] != ws[1] {
                    return bad(format!("expects [{}, H, W], got {input:?}", ws[1]));
                }
                let p = c.spec.padding;
                if input[1] + 2 * p < ws[2] || input[2] + 2 * p < ws[3] {
                    return bad(format!("kernel larger than padded input {input:?}"));
                }
                Ok(vec![
                    ws[0],
                    (input[1] + 2 * p - ws[2]) / c.spec.stride + 1,
                    (input[2] + 2 * p - ws[3]) / c.spec.stride + 1,
                ])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::BatchNorm(b) => {
                let c = b.channels();
                let stats_ok = [&b.beta, &b.running_mean, &b.running_var]
                    .iter()
                    .all(|t| t.shape() == [c]);
                if !stats_ok {
                    return bad("statistics length differs from channel count".into());
                }
                if !(input.len() == 1 || input.len() == 3) || input[0] != c {
                    return bad(format!("{c} channels, got input {input:?}"));
                }
                Ok(input.to_vec())
            }
        }
    }
}

/// Batch statistics of one BatchNorm layer (`var` is the biased variance).
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Tensor,
    pub var: Tensor,
    /// Number of values each statistic was averaged over (0 for running stats).
    pub count: usize,
}

/// Which statistics BatchNorm layers normalise with.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Current-batch statistics, differentiated through.
    Batch,
    /// Stored running statistics, as constants.
    Running,
    /// Caller-supplied statistics (one per BatchNorm layer), as constants.
    Fixed(&'a [BnStats]),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases.
    Default,
    /// `U(-2/fan_in, 2/fan_in)` weights (expected row-wise l1 norm of 1) and
    /// zero biases, so interval widths do not grow from layer to layer on
    /// average.
    IbpAware,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<Layer>,
}

/// A network's parameters registered on a tape, grouped per layer.
pub struct ParamVars<'t> {
    per_layer: Vec<Vec<Var<'t>>>,
}

impl<'t> ParamVars<'t> {
    pub fn layer(&self, i: usize) -> &[Var<'t>] {
        &self.per_layer[i]
    }

    /// All parameter vars in [`Network::params`] order.
    pub fn flat(&self) -> Vec<Var<'t>> {
        self.per_layer.iter().flatten().copied().collect()
    }
}

/// Output of a taped forward pass.
pub struct ForwardTrace<'t> {
    pub logits: Var<'t>,
    /// Statistics each BatchNorm layer normalised with, in layer order.
    pub bn_stats: Vec<BnStats>,
    /// Inputs to every ReLU, in layer order.
    pub relu_inputs: Vec<std::rc::Rc<Tensor>>,
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let mut shape = input_shape.clone();
        for layer in &layers {
            shape = layer.output_shape(&shape)?;
        }
        let num_classes = match layers.last() {
            Some(Layer::Affine(a)) => a.weight.shape()[0],
            _ => return Err(Error::InvalidNetwork("final layer must be affine".into())),
        };
        Ok(Network {
            input_shape,
            num_classes,
            layers,
        })
    }

    /// Fully-connected stack `dims[0] -> ... -> dims[last]`, zero-initialised,
    /// with ReLUs between affine layers when `relu` is set (otherwise a deep
    /// linear network).
    pub fn mlp(dims: &[usize], relu: bool) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidNetwork("mlp needs at least two sizes".into()));
        }
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            layers.push(Layer::affine(w[1], w[0]));
            if relu && i + 2 < dims.len() {
                layers.push(Layer::Relu);
            }
        }
        Network::new(vec![dims[0]], layers)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::BatchNorm(_)))
    }

    pub fn running_stats(&self) -> Vec<BnStats> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm(b) => Some(b.running_stats()),
                _ => None,
            })
            .collect()
    }

    /// Registers every parameter on `tape`, as gradient-receiving leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> ParamVars<'t> {
        let per_layer = self
            .layers
            .iter()
            .map(|l| {
                l.params()
                    .into_iter()
                    .map(|p| {
                        if trainable {
                            tape.var(p.clone())
                        } else {
                            tape.constant(p.clone())
                        }
                    })
                    .collect()
            })
            .collect();
        ParamVars { per_layer }
    }

    /// Checks that `x` is `[B, input_shape...]`.
    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.ndim() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            let mut want = vec![x.rows()];
            want.extend_from_slice(&self.input_shape);
            return Err(Error::shape("network input", x.shape(), &want));
        }
        Ok(())
    }

    /// Taped forward pass of a batch.
    pub fn forward_graph<'t>(
        &self,
        params: &ParamVars<'t>,
        x: Var<'t>,
        bn: BnMode<'_>,
    ) -> Result<ForwardTrace<'t>> {
        self.check_input(&x.value())?;
        let mut h = x;
        let mut bn_stats = Vec::new();
        let mut relu_inputs = Vec::new();
        let mut bn_index = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let p = params.layer(i);
            h = match layer {
                Layer::Affine(_) => h.linear(p[0], Some(p[1]))?,
                Layer::Conv2d(c) => h.conv2d(p[0], Some(p[1]), c.spec)?,
                Layer::Relu => {
                    relu_inputs.push(h.value());
                    h.relu()
                }
                Layer::Flatten => h.flatten_batch()?,
                Layer::BatchNorm(b) => {
                    let (out, stats) = batchnorm_forward(b, h, p[0], p[1], bn, bn_index)?;
                    bn_index += 1;
                    bn_stats.push(stats);
                    out
                }
            };
        }
        Ok(ForwardTrace {
            logits: h,
            bn_stats,
            relu_inputs,
        })
    }

    /// Untracked forward pass. In train mode BatchNorm uses batch statistics
    /// and updates its running statistics.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let bn = match mode {
            Mode::Train => BnMode::Batch,
            Mode::Eval => BnMode::Running,
        };
        let trace = self.forward_graph(&params, xv, bn)?;
        let logits = (*trace.logits.value()).clone();
        if mode == Mode::Train {
            self.update_running_stats(&trace.bn_stats);
        }
        Ok(logits)
    }

    /// Eval-mode logits, without touching running statistics.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let trace = self.forward_graph(&params, xv, BnMode::Running)?;
        let logits = (*trace.logits.value()).clone();
        Ok(logits)
    }

    /// Exponential moving average update from batch statistics
    /// (unbiased variance, as in common frameworks).
    pub fn update_running_stats(&mut self, stats: &[BnStats]) {
        let mut it = stats.iter();
        for layer in &mut self.layers {
            let Layer::BatchNorm(b) = layer else { continue };
            let Some(s) = it.next() else { return };
            let m = b.momentum;
            let n = s.count as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for (r, &v) in b.running_mean.data_mut().iter_mut().zip(s.mean.data()) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, &v) in b.running_var.data_mut().iter_mut().zip(s.var.data()) {
                *r = (1.0 - m) * *r + m * v * unbias;
            }
        }
    }

    /// Re-draws every parameter from `scheme`, deterministically in `seed`.
    pub fn init(&mut self, scheme: InitScheme, seed: u64) {
        let mut rng = rng::rng(seed, "init", 0);
        for layer in &mut self.layers {
            let (w, b) = match layer {
                Layer::Affine(a) => (&mut a.weight, &mut a.bias),
                Layer::Conv2d(c) => (&mut c.weight, &mut c.bias),
                Layer::BatchNorm(bn) => {
                    *bn = BatchNorm {
                        eps: bn.eps,
                        momentum: bn.momentum,
                        ..BatchNorm::new(bn.channels())
                    };
                    continue;
                }
                Layer::Relu | Layer::Flatten => continue,
            };
            let fan_in: usize = w.shape()[1..].iter().product();
            let fan_in = fan_in.max(1) as f64;
            let (wb, bb) = match scheme {
                InitScheme::Default => (1.0 / fan_in.sqrt(), 1.0 / fan_in.sqrt()),
                InitScheme::IbpAware => (2.0 / fan_in, 0.0),
            };
            for v in w.data_mut() {
                *v = rng.gen_range(-wb..=wb);
            }
            for v in b.data_mut() {
                *v = if bb > 0.0 { rng.gen_range(-bb..=bb) } else { 0.0 };
            }
        }
    }

    /// Copy with every parameter entry scaled by `factor` (biases included).
    pub fn scaled(&self, factor: f64) -> Network {
        let mut out = self.clone();
        for p in out.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
        out
    }
}

fn batchnorm_forward<'t>(
    b: &BatchNorm,
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    mode: BnMode<'_>,
    index: usize,
) -> Result<(Var<'t>, BnStats)> {
    let xs = x.shape();
    let c = b.channels();
    let (axes, bshape): (&[usize], Vec<usize>) = if xs.len() == 2 {
        (&[0], vec![1, c])
    } else {
        (&[0, 2, 3], vec![1, c, 1, 1])
    };
    let tape = x.tape();
    let gamma_b = gamma.reshape(&bshape)?;
    let beta_b = beta.reshape(&bshape)?;
    let fixed = match mode {
        BnMode::Batch => None,
        BnMode::Running => Some(b.running_stats()),
        BnMode::Fixed(stats) => Some(stats.get(index).cloned().ok_or_else(|| {
            Error::InvalidNetwork(format!("no fixed statistics for batchnorm #{index}"))
        })?),
    };
    match fixed {
        None => {
            let count = xs[0] * xs.iter().skip(2).product::<usize>();
            let mean = x.mean_axes(axes)?;
            let centered = x.sub(mean)?;
            let var = centered.mul(centered)?.mean_axes(axes)?;
            let std = var.add_scalar(b.eps).sqrt()?;
            let out = centered.div(std)?.mul(gamma_b)?.add(beta_b)?;
            let stats = BnStats {
                mean: mean.value().reshape(&[c])?,
                var: var.value().reshape(&[c])?,
                count,
            };
            Ok((out, stats))
        }
        Some(stats) => {
            let mean = tape.constant(stats.mean.reshape(&bshape)?);
            let std = tape.constant(stats.var.map(|v| (v + b.eps).sqrt()).reshape(&bshape)?);
            let out = x.sub(mean)?.div(std)?.mul(gamma_b)?.add(beta_b)?;
            Ok((out, stats))
        }
    }
}

/// BatchNorm with constant statistics, returning the output and the
/// per-channel scale `gamma / sqrt(var + eps)` in broadcastable shape.
pub(crate) fn batchnorm_constant<'t>(
    b: &BatchNorm,
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    mode: BnMode<'_>,
    index: usize,
) -> Result<(Var<'t>, Var<'t>)> {
    if matches!(mode, BnMode::Batch) {
        return Err(Error::InvalidNetwork(
            "bounds need frozen batchnorm statistics".into(),
        ));
    }
    let bshape = if x.value().ndim() == 2 {
        vec![1, b.channels()]
    } else {
        vec![1, b.channels(), 1, 1]
    };
    let (out, stats) = batchnorm_forward(b, x, gamma, beta, mode, index)?;
    let std = x
        .tape()
        .constant(stats.var.map(|v| (v + b.eps).sqrt()).reshape(&bshape)?);
    let scale = gamma.reshape(&bshape)?.div(std)?;
    Ok((out, scale))
}

/// `z_i = logits_y - logits_i` for each row of `[B, k]` logits.
pub fn logit_differences(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let logits = if logits.ndim() == 1 {
        logits.reshape(&[1, logits.len()])?
    } else {
        logits.clone()
    };
    let tape = Tape::new();
    let z = logit_differences_graph(tape.constant(logits), labels)?;
    let out = (*z.value()).clone();
    Ok(out)
}

/// Taped [`logit_differences`].
pub fn logit_differences_graph<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    logits.gather_labels(labels)?.sub(logits)
}
