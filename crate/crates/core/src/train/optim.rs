use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// SGD with heavy-ball momentum, or Adam. Weight decay is added to the
/// gradient (L2 style) for both.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    adam_eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn sgd(momentum: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Sgd, momentum, weight_decay)
    }

    pub fn adam(weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Adam, 0.0, weight_decay)
    }

    pub fn new(kind: OptimizerKind, momentum: f64, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            momentum,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            if self.kind == OptimizerKind::Adam {
                self.v = self.m.clone();
            }
        }
        self.t += 1;
        let wd = self.weight_decay;
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.m[i];
            match self.kind {
                OptimizerKind::Sgd => {
                    for ((w, &gi), mi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        let d = gi + wd * *w;
                        *mi = self.momentum * *mi + d;
                        *w -= lr * *mi;
                    }
                }
                OptimizerKind::Adam => {
                    let v = &mut self.v[i];
                    let c1 = 1.0 - self.beta1.powi(self.t as i32);
                    let c2 = 1.0 - self.beta2.powi(self.t as i32);
                    for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let d = gi + wd * *w;
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * d;
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * d * d;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.adam_eps);
                    }
                }
            }
        }
    }
}

/// Global l2 norm of `grads`.
pub fn grad_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global l2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
