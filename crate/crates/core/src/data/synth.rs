use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// `k` Gaussian blobs of `n_per_class` points in `[0, 1]^d`, class-major.
///
/// Centers come from a fixed stream and do not depend on `seed`; only the
/// samples do. Points are clamped to the unit cube.
pub fn synth_blobs(k: usize, n_per_class: usize, d: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if k < 2 || d < 2 {
        return Err(Error::Domain {
            op: "synth_blobs",
            detail: format!("need k >= 2 and d >= 2, got k={k}, d={d}"),
        });
    }
    if !(spread >= 0.0) {
        return Err(Error::Domain {
            op: "synth_blobs",
            detail: format!("spread must be >= 0, got {spread}"),
        });
    }
    let mut crng = rng::rng(0, "blob-centers", (k * 1000 + d) as u64);
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| crng.gen_range(0.15..0.85)).collect())
        .collect();
    let noise = Normal::new(0.0, spread).expect("spread checked");
    let mut r = rng::rng(seed, "blobs", 0);
    let mut data = Vec::with_capacity(k * n_per_class * d);
    let mut labels = Vec::with_capacity(k * n_per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            data.extend(center.iter().map(|&m| (m + noise.sample(&mut r)).clamp(0.0, 1.0)));
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![k * n_per_class, d], data)?, labels, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = synth_blobs(3, 20, 4, 0.05, 7).unwrap();
        assert_eq!(a, synth_blobs(3, 20, 4, 0.05, 7).unwrap());
        assert_ne!(a, synth_blobs(3, 20, 4, 0.05, 8).unwrap());
        assert_eq!(a.class_counts(), vec![20, 20, 20]);
        assert!(a.inputs().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(synth_blobs(1, 5, 4, 0.1, 0).is_err());
    }
}
