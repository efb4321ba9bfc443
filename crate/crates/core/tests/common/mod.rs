#![allow(dead_code)]

use certrain::network::BatchNorm;
use certrain::rng::{self, Rng};
use certrain::{InitScheme, Layer, Network, Tensor};
use rand::Rng as _;

/// Random fully-connected ReLU net with `depth` affine layers (2..=5 when
/// drawn by [`random_shape`]), optionally with BatchNorm after each hidden
/// affine layer and random running statistics.
pub fn random_mlp(rng: &mut Rng, dims: &[usize], relu: bool, batchnorm: bool) -> Network {
    let mut layers = Vec::new();
    for (i, w) in dims.windows(2).enumerate() {
        layers.push(Layer::affine(w[1], w[0]));
        if i + 2 < dims.len() {
            if batchnorm {
                layers.push(Layer::BatchNorm(random_bn(rng, w[1])));
            }
            if relu {
                layers.push(Layer::Relu);
            }
        }
    }
    let mut net = Network::new(vec![dims[0]], layers).unwrap();
    net.init(InitScheme::Default, rng.gen());
    let scale = rng.gen_range(0.5..2.0);
    let mut net = net.scaled(scale);
    // init resets BatchNorm, so randomise it afterwards
    if batchnorm {
        for layer in net.layers_mut() {
            if let Layer::BatchNorm(b) = layer {
                *b = random_bn(rng, b.channels());
            }
        }
    }
    net
}

fn random_bn(rng: &mut Rng, c: usize) -> BatchNorm {
    let mut b = BatchNorm::new(c);
    let mut fill = |t: &mut Tensor, lo: f64, hi: f64| t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(lo..hi));
    fill(&mut b.gamma, -1.5, 1.5);
    fill(&mut b.beta, -0.5, 0.5);
    fill(&mut b.running_mean, -0.5, 0.5);
    fill(&mut b.running_var, 0.2, 2.0);
    b
}

/// Layer sizes: input 1..=8, 1..=4 hidden layers of width 1..=32, 2..=6
/// classes.
pub fn random_shape(rng: &mut Rng) -> Vec<usize> {
    let depth = rng.gen_range(2..=5);
    let mut dims = vec![rng.gen_range(1..=8)];
    for _ in 0..depth - 1 {
        dims.push(rng.gen_range(1..=32));
    }
    dims.push(rng.gen_range(2..=6));
    dims
}

pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn labels(rng: &mut Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..k)).collect()
}

pub fn stream(tag: &str, index: u64) -> Rng {
    rng::rng(20_240_601, tag, index)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
