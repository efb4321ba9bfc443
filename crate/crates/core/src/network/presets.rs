use std::fmt;
use std::str::FromStr;

use super::{Affine, Layer, Network};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named architectures.
///
/// * `toy(n,w)`: depth-`n` two-unit ReLU net whose interval bounds scale with
///   `w` and explode with depth. First layer `[[w,-w],[-w,w]]`, hidden layers
///   `2I`, output `2I x + [3, 1]`.
/// * `mlp-small`: flatten, 256, 256, k.
/// * `cnn-mini`: conv 8@4x4/2, conv 16@4x4/2, dense 100, k.
/// * `cnn5-thin`: the five-layer BatchNorm CNN at reduced width: conv
///   16@3x3/1, conv 16@4x4/2, conv 32@4x4/2, dense 128 (each followed by
///   BatchNorm and ReLU), dense k.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Preset {
    Toy { depth: usize, w: f64 },
    MlpSmall,
    CnnMini,
    Cnn5Thin,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp-small" => return Ok(Preset::MlpSmall),
            "cnn-mini" => return Ok(Preset::CnnMini),
            "cnn5-thin" => return Ok(Preset::Cnn5Thin),
            _ => {}
        }
        let args = s
            .strip_prefix("toy(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))?;
        let (n, w) = args
            .split_once(',')
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))?;
        let depth = n.trim().parse().map_err(|_| Error::UnknownPreset(s.to_string()))?;
        let w = w.trim().parse().map_err(|_| Error::UnknownPreset(s.to_string()))?;
        Ok(Preset::Toy { depth, w })
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Preset::Toy { depth, w } => write!(f, "toy({depth},{w})"),
            Preset::MlpSmall => f.write_str("mlp-small"),
            Preset::CnnMini => f.write_str("cnn-mini"),
            Preset::Cnn5Thin => f.write_str("cnn5-thin"),
        }
    }
}

impl Preset {
    /// Builds the architecture for inputs of `input_shape` (per sample) and
    /// `num_classes` outputs. Weights are zero except for `toy`, which is
    /// fully specified; call [`Network::init`] for the others.
    pub fn build(&self, input_shape: &[usize], num_classes: usize) -> Result<Network> {
        match *self {
            Preset::Toy { depth, w } => toy(depth, w),
            Preset::MlpSmall => {
                let d: usize = input_shape.iter().product();
                let mut layers = Vec::new();
                if input_shape.len() > 1 {
                    layers.push(Layer::Flatten);
                }
                layers.extend([
                    Layer::affine(256, d),
                    Layer::Relu,
                    Layer::affine(256, 256),
                    Layer::Relu,
                    Layer::affine(num_classes, 256),
                ]);
                Network::new(input_shape.to_vec(), layers)
            }
            Preset::CnnMini => {
                let (c, h, w) = image_dims(input_shape)?;
                let (h2, w2) = (half(half(h)), half(half(w)));
                Network::new(
                    input_shape.to_vec(),
                    vec![
                        Layer::conv(8, c, 4, 2, 1),
                        Layer::Relu,
                        Layer::conv(16, 8, 4, 2, 1),
                        Layer::Relu,
                        Layer::Flatten,
                        Layer::affine(100, 16 * h2 * w2),
                        Layer::Relu,
                        Layer::affine(num_classes, 100),
                    ],
                )
            }
            Preset::Cnn5Thin => {
                let (c, h, w) = image_dims(input_shape)?;
                let (h2, w2) = (half(half(h)), half(half(w)));
                Network::new(
                    input_shape.to_vec(),
                    vec![
                        Layer::conv(16, c, 3, 1, 1),
                        Layer::batchnorm(16),
                        Layer::Relu,
                        Layer::conv(16, 16, 4, 2, 1),
                        Layer::batchnorm(16),
                        Layer::Relu,
                        Layer::conv(32, 16, 4, 2, 1),
                        Layer::batchnorm(32),
                        Layer::Relu,
                        Layer::Flatten,
                        Layer::affine(128, 32 * h2 * w2),
                        Layer::batchnorm(128),
                        Layer::Relu,
                        Layer::affine(num_classes, 128),
                    ],
                )
            }
        }
    }
}

/// Output size of a 4x4, stride-2, padding-1 convolution.
fn half(n: usize) -> usize {
    (n + 2 - 4) / 2 + 1
}

fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] if h >= 4 && w >= 4 => Ok((c, h, w)),
        _ => Err(Error::InvalidNetwork(format!(
            "convolutional presets need [C, H, W] inputs of at least 4x4, got {shape:?}"
        ))),
    }
}

fn toy(depth: usize, w: f64) -> Result<Network> {
    if depth < 2 {
        return Err(Error::InvalidNetwork("toy network depth must be >= 2".into()));
    }
    let affine = |weight: [f64; 4], bias: [f64; 2]| {
        Layer::Affine(Affine {
            weight: Tensor::from_parts(vec![2, 2], weight.to_vec()),
            bias: Tensor::from_parts(vec![2], bias.to_vec()),
        })
    };
    let mut layers = vec![affine([w, -w, -w, w], [0.0, 0.0]), Layer::Relu];
    for _ in 2..depth {
        layers.push(affine([2.0, 0.0, 0.0, 2.0], [0.0, 0.0]));
        layers.push(Layer::Relu);
    }
    layers.push(affine([2.0, 0.0, 0.0, 2.0], [3.0, 1.0]));
    Network::new(vec![2], layers)
}
