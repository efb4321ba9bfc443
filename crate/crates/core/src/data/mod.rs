//! Datasets: IDX files, synthetic blobs and train/validation splits.

mod idx;
mod synth;

pub use idx::{decode_idx_images, decode_idx_labels, encode_idx_images, encode_idx_labels, load_idx, write_idx};
pub use synth::synth_blobs;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Train/validation indices into a [`Dataset`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Inputs in `[0, 1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    split: Option<Split>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.ndim() < 2 || inputs.rows() != labels.len() {
            return Err(Error::shape("dataset", inputs.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes,
            });
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            split: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn split(&self) -> Option<&Split> {
        self.split.as_ref()
    }

    /// Rows `idx` as inputs and labels.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.inputs.select_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// New dataset from rows `idx`, without split metadata.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let (inputs, labels) = self.batch(idx);
        Dataset {
            inputs,
            labels,
            num_classes: self.num_classes,
            split: None,
        }
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Training part of the split, or everything when unsplit.
    pub fn train_part(&self) -> Dataset {
        match &self.split {
            Some(s) => self.subset(&s.train),
            None => self.subset(&(0..self.len()).collect::<Vec<_>>()),
        }
    }

    /// Validation part of the split, or everything when unsplit.
    pub fn val_part(&self) -> Dataset {
        match &self.split {
            Some(s) => self.subset(&s.val),
            None => self.subset(&(0..self.len()).collect::<Vec<_>>()),
        }
    }

    /// Number of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Shuffled split with `round(val_fraction * N)` validation samples; both
/// index lists are sorted.
pub fn split(dataset: &Dataset, val_fraction: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Domain {
            op: "split",
            detail: format!("validation fraction must lie in [0, 1), got {val_fraction}"),
        });
    }
    let n = dataset.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::rng(seed, "split", 0));
    let n_val = (val_fraction * n as f64).round() as usize;
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok(Dataset {
        split: Some(Split { train, val }),
        ..dataset.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let x = Tensor::new(vec![n, 2], (0..2 * n).map(|i| i as f64 / (2 * n) as f64).collect()).unwrap();
        Dataset::new(x, (0..n).map(|i| i % 3).collect(), 3).unwrap()
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let d = split(&toy(100), 0.2, 1).unwrap();
        let s = d.split().unwrap();
        assert_eq!((s.train.len(), s.val.len()), (80, 20));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split(&toy(100), 0.2, 1).unwrap(), d);

        let d0 = split(&toy(10), 0.0, 1).unwrap();
        assert!(d0.split().unwrap().val.is_empty());
        assert!(split(&toy(10), 1.0, 1).is_err());
    }

    #[test]
    fn rejects_bad_labels() {
        let x = Tensor::zeros(&[2, 2]);
        assert!(matches!(Dataset::new(x, vec![0, 5], 3), Err(Error::LabelOutOfRange { .. })));
    }
}
