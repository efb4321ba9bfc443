use std::path::Path;

use crate::attacks::{AdversarialBatch, AttackConfig};
use crate::bounds::{self, BoundOptions};
use crate::error::Result;
use crate::fsutil::write_atomic;
use crate::losses::{loss_value_at, LossFamily, LossSpec};
use crate::network::Preset;
use crate::tensor::Tensor;

pub const TOY_X0: [f64; 2] = [-5.0, 5.0];
pub const TOY_LABEL: usize = 1;
pub const TOY_EPS: f64 = 10.0;
/// Fixed adversarial point: the logit difference there is -2 for every `w`.
pub const TOY_X_ADV: [f64; 2] = [0.0, 0.0];

/// `z_0 = w 2^(n-1) (x_1 - x_0) - 2` for label 1 and `w >= 0`.
pub fn toy_closed_form(depth: usize, w: f64, x: [f64; 2]) -> f64 {
    w * 2f64.powi(depth as i32 - 1) * (x[1] - x[0]) - 2.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyRow {
    pub depth: usize,
    pub w: f64,
    pub family: LossFamily,
    pub alpha: f64,
    pub loss: f64,
    pub adv_loss: f64,
    pub ibp_loss: f64,
    /// IBP lower bound on the logit difference of the wrong class.
    pub lower_bound: f64,
}

/// Evaluates every `(family, alpha)` pair on `toy(n, w)` for each depth and
/// `w`, at `x0 = [-5, 5]`, label 1, radius 10 and `x_adv = [0, 0]`.
pub fn toy_sweep(depths: &[usize], w_grid: &[f64], families: &[(LossFamily, f64)]) -> Result<Vec<ToyRow>> {
    let x = Tensor::new(vec![1, 2], TOY_X0.to_vec())?;
    let adv = AdversarialBatch {
        x_adv: Tensor::new(vec![1, 2], TOY_X_ADV.to_vec())?,
        in_ball: vec![true],
    };
    let y = [TOY_LABEL];
    let mut rows = Vec::new();
    for &depth in depths {
        for &w in w_grid {
            let net = Preset::Toy { depth, w }.build(&[2], 2)?;
            let state = bounds::ibp_bounds(&net, &x, &y, TOY_EPS, BoundOptions::default())?;
            let lower_bound = state.lower.data()[1 - TOY_LABEL];
            let base = LossSpec::new(LossFamily::Adversarial, AttackConfig::pgd(TOY_EPS, 1));
            let adv_loss = loss_value_at(&net, &x, &y, &base, Some(&adv))?.total;
            let ibp_spec = LossSpec {
                family: LossFamily::Ibp,
                ..base.clone()
            };
            let ibp_loss = loss_value_at(&net, &x, &y, &ibp_spec, None)?.total;
            for &(family, alpha) in families {
                let spec = LossSpec {
                    family,
                    alpha,
                    ..base.clone()
                };
                let loss = loss_value_at(&net, &x, &y, &spec, Some(&adv))?.total;
                rows.push(ToyRow {
                    depth,
                    w,
                    family,
                    alpha,
                    loss,
                    adv_loss,
                    ibp_loss,
                    lower_bound,
                });
            }
        }
    }
    Ok(rows)
}

pub fn toy_csv(rows: &[ToyRow]) -> String {
    let mut out = String::from("depth,w,family,alpha,loss,adv_loss,ibp_loss,lower_bound\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.depth, r.w, r.family, r.alpha, r.loss, r.adv_loss, r.ibp_loss, r.lower_bound
        ));
    }
    out
}

pub fn write_toy_csv(path: impl AsRef<Path>, rows: &[ToyRow]) -> Result<()> {
    write_atomic(path.as_ref(), toy_csv(rows).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn w_zero_bounds_and_constant_adversarial_part() {
        let rows = toy_sweep(&[2, 5, 18], &[0.0, 0.5], &[(LossFamily::MtlIbp, 0.01)]).unwrap();
        for r in &rows {
            if r.w == 0.0 {
                assert_eq!(r.lower_bound, -2.0);
            }
            assert_eq!(r.adv_loss, rows[0].adv_loss);
        }
        assert!((rows[0].adv_loss - (1.0 + 2f64.exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn ibp_loss_grows_with_w_and_depth() {
        let grid = [0.0, 0.01, 0.1, 1.0];
        let rows = toy_sweep(&[2, 4, 8], &grid, &[(LossFamily::ExpIbp, 0.1)]).unwrap();
        for d in [2, 4, 8] {
            let s: Vec<f64> = rows.iter().filter(|r| r.depth == d).map(|r| r.ibp_loss).collect();
            assert!(s.windows(2).all(|p| p[0] <= p[1]));
        }
        for (i, _) in grid.iter().enumerate() {
            let s: Vec<f64> = [0, 1, 2].iter().map(|k| rows[k * grid.len() + i].ibp_loss).collect();
            assert!(s.windows(2).all(|p| p[0] <= p[1] + 1e-12));
        }
        assert!(toy_csv(&rows).starts_with("depth,w,family"));
    }
}
