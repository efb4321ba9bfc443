//! Fixtures shared by the benchmarks.

use certrain::{InitScheme, Network, Preset, Tensor};

/// Deterministic pseudo-random tensor with entries in `[0, 1)`.
pub fn tensor(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// An initialised preset for 28x28 single-channel inputs and 10 classes.
pub fn mnist_net(preset: Preset) -> Network {
    let mut net = preset.build(&[1, 28, 28], 10).expect("preset builds");
    net.init(InitScheme::Default, 0);
    net
}
