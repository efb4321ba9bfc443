//! Differentiable operations on [`Var`].

use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{Tensor, Var};
use crate::error::{Error, Result};

/// Stride and zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

fn unary<'t>(
    a: Var<'t>,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Var<'t> {
    let av = a.value();
    let out = av.map(&f);
    let ov = Rc::new(out.clone());
    a.tape().push_op(
        out,
        &[a],
        Box::new(move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(av.data())
                .zip(ov.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        }),
    )
}

fn sign_of(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (av, bv) = (self.value(), other.value());
        let out = kernels::broadcast_binary("add", &av, &bv, |x, y| x + y)?;
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        Ok(self.tape().push_op(
            out,
            &[self, other],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| kernels::reduce_to_shape(g, &sa)),
                    need[1].then(|| kernels::reduce_to_shape(g, &sb)),
                ]
            }),
        ))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (av, bv) = (self.value(), other.value());
        let out = kernels::broadcast_binary("sub", &av, &bv, |x, y| x - y)?;
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        Ok(self.tape().push_op(
            out,
            &[self, other],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| kernels::reduce_to_shape(g, &sa)),
                    need[1].then(|| kernels::reduce_to_shape(&g.map(|v| -v), &sb)),
                ]
            }),
        ))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (av, bv) = (self.value(), other.value());
        let out = kernels::broadcast_binary("mul", &av, &bv, |x, y| x * y)?;
        Ok(self.tape().push_op(
            out,
            &[self, other],
            Box::new(move |g, need| {
                let ga = need[0].then(|| {
                    let full = kernels::broadcast_binary("mul", g, &bv, |x, y| x * y).unwrap();
                    kernels::reduce_to_shape(&full, av.shape())
                });
                let gb = need[1].then(|| {
                    let full = kernels::broadcast_binary("mul", g, &av, |x, y| x * y).unwrap();
                    kernels::reduce_to_shape(&full, bv.shape())
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        let (av, bv) = (self.value(), other.value());
        let out = kernels::broadcast_binary("div", &av, &bv, |x, y| x / y)?;
        Ok(self.tape().push_op(
            out,
            &[self, other],
            Box::new(move |g, need| {
                let ga = need[0].then(|| {
                    let full = kernels::broadcast_binary("div", g, &bv, |x, y| x / y).unwrap();
                    kernels::reduce_to_shape(&full, av.shape())
                });
                let gb = need[1].then(|| {
                    // d(a/b)/db = -a / b^2
                    let ratio = kernels::broadcast_binary("div", &av, &bv, |x, y| x / (y * y)).unwrap();
                    let full = kernels::broadcast_binary("div", g, &ratio, |x, r| -x * r).unwrap();
                    kernels::reduce_to_shape(&full, bv.shape())
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        unary(self, move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        unary(self, move |x| x + c, |_, _| 1.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Entrywise absolute value; subgradient 0 at 0.
    pub fn abs(self) -> Var<'t> {
        unary(self, f64::abs, |x, _| sign_of(x))
    }

    pub fn exp(self) -> Var<'t> {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn log(self) -> Result<Var<'t>> {
        let v = self.value();
        if let Some(bad) = v.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(unary(self, f64::ln, |x, _| 1.0 / x))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        let v = self.value();
        if let Some(bad) = v.data().iter().find(|&&x| !(x >= 0.0)) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative input {bad}"),
            });
        }
        Ok(unary(self, f64::sqrt, |_, y| 0.5 / y))
    }

    /// `max(0, x)`; subgradient 0 at 0.
    pub fn relu(self) -> Var<'t> {
        unary(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Clamp to `[lo, hi]`; gradient 1 inside the closed interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        unary(
            self,
            move |x| x.clamp(lo, hi),
            move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
        )
    }

    /// Sign with `sign(0) = 0`. Piecewise constant, so its gradient is zero.
    pub fn sign(self) -> Var<'t> {
        unary(self, sign_of, |_, _| 0.0)
    }

    pub fn sum(self) -> Var<'t> {
        let v = self.value();
        let shape = v.shape().to_vec();
        self.tape().push_op(
            Tensor::scalar(v.sum()),
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(self, axes: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let mut shape = v.shape().to_vec();
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::Domain {
                    op: "sum_axes",
                    detail: format!("axis {a} out of range for {shape:?}"),
                });
            }
            shape[a] = 1;
        }
        let out = kernels::reduce_to_shape(&v, &shape);
        let full = v.shape().to_vec();
        Ok(self.tape().push_op(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(kernels::broadcast_to(g, &full))]),
        ))
    }

    pub fn mean_axes(self, axes: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let n: usize = axes.iter().map(|&a| shape.get(a).copied().unwrap_or(1)).product();
        Ok(self.sum_axes(axes)?.scale(1.0 / n.max(1) as f64))
    }

    /// Maximum over the last axis; the gradient goes to the first maximiser.
    pub fn max_last(self) -> Var<'t> {
        let v = self.value();
        let k = *v.shape().last().unwrap_or(&1);
        let rows = v.len() / k.max(1);
        let mut arg = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &v.data()[r * k..(r + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            arg.push(best);
            out.push(row[best]);
        }
        let out_shape = v.shape()[..v.ndim().saturating_sub(1)].to_vec();
        let in_shape = v.shape().to_vec();
        self.tape().push_op(
            Tensor::from_parts(out_shape, out),
            &[self],
            Box::new(move |g, _| {
                let mut d = vec![0.0; rows * k];
                for (r, &j) in arg.iter().enumerate() {
                    d[r * k + j] = g.data()[r];
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), d))]
            }),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let out = v.reshape(shape)?;
        let orig = v.shape().to_vec();
        Ok(self.tape().push_op(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.reshape(&orig).unwrap())]),
        ))
    }

    /// Collapses every dimension after the first.
    pub fn flatten_batch(self) -> Result<Var<'t>> {
        let v = self.value();
        let b = v.rows();
        self.reshape(&[b, v.row_len()])
    }

    /// 2-D matrix product.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (av, bv) = (self.value(), other.value());
        let out = kernels::matmul_checked(&av, &bv)?;
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        Ok(self.tape().push_op(
            out,
            &[self, other],
            Box::new(move |g, need| {
                let ga = need[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g.data(), false, bv.data(), true, 0.0, &mut d);
                    Tensor::from_parts(vec![m, k], d)
                });
                let gb = need[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    kernels::gemm(k, m, n, av.data(), true, g.data(), false, 0.0, &mut d);
                    Tensor::from_parts(vec![k, n], d)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `x W^T + b` for `x: [B, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let (xv, wv) = (self.value(), weight.value());
        if xv.ndim() != 2 || wv.ndim() != 2 || xv.shape()[1] != wv.shape()[1] {
            return Err(Error::shape("linear", xv.shape(), wv.shape()));
        }
        let (bsz, fin, fout) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        let mut out = vec![0.0; bsz * fout];
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [fout] {
                return Err(Error::shape("linear bias", bv.shape(), &[fout]));
            }
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bv.data());
            }
        }
        kernels::gemm(bsz, fin, fout, xv.data(), false, wv.data(), true, 1.0, &mut out);
        let backward = Box::new(move |g: &Tensor, need: &[bool]| {
            let gx = need[0].then(|| {
                let mut d = vec![0.0; bsz * fin];
                kernels::gemm(bsz, fout, fin, g.data(), false, wv.data(), false, 0.0, &mut d);
                Tensor::from_parts(vec![bsz, fin], d)
            });
            let gw = need[1].then(|| {
                let mut d = vec![0.0; fout * fin];
                kernels::gemm(fout, bsz, fin, g.data(), true, xv.data(), false, 0.0, &mut d);
                Tensor::from_parts(vec![fout, fin], d)
            });
            let mut grads = vec![gx, gw];
            if need.len() > 2 {
                grads.push(need[2].then(|| kernels::reduce_to_shape(g, &[fout])));
            }
            grads
        });
        let tensor = Tensor::from_parts(vec![bsz, fout], out);
        Ok(match bias {
            Some(b) => self.tape().push_op(tensor, &[self, weight, b], backward),
            None => self.tape().push_op(tensor, &[self, weight], backward),
        })
    }

    /// 2-D convolution, `x: [B, C, H, W]`, `w: [O, C, kh, kw]`, `b: [O]`.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, spec: Conv2dSpec) -> Result<Var<'t>> {
        let (xv, wv) = (self.value(), weight.value());
        if xv.ndim() != 4 || wv.ndim() != 4 || xv.shape()[1] != wv.shape()[1] || spec.stride == 0 {
            return Err(Error::shape("conv2d", xv.shape(), wv.shape()));
        }
        let (bsz, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (o, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
        if h + 2 * spec.padding < kh || w + 2 * spec.padding < kw {
            return Err(Error::shape("conv2d", xv.shape(), wv.shape()));
        }
        let geom = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride: spec.stride,
            pad: spec.padding,
            ho: (h + 2 * spec.padding - kh) / spec.stride + 1,
            wo: (w + 2 * spec.padding - kw) / spec.stride + 1,
        };
        let (patch, pos) = (geom.patch(), geom.positions());
        let bias_v = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.shape() != [o] {
                    return Err(Error::shape("conv2d bias", bv.shape(), &[o]));
                }
                Some(bv)
            }
            None => None,
        };
        let mut out = vec![0.0; bsz * o * pos];
        let mut cols = vec![0.0; patch * pos];
        for bi in 0..bsz {
            kernels::im2col(xv.row(bi), &geom, &mut cols);
            let dst = &mut out[bi * o * pos..(bi + 1) * o * pos];
            if let Some(bv) = &bias_v {
                for (oi, chunk) in dst.chunks_mut(pos).enumerate() {
                    chunk.fill(bv.data()[oi]);
                }
            }
            kernels::gemm(o, patch, pos, wv.data(), false, &cols, false, 1.0, dst);
        }
        let backward = Box::new(move |g: &Tensor, need: &[bool]| {
            let mut gx = need[0].then(|| vec![0.0; bsz * c * h * w]);
            let mut gw = need[1].then(|| vec![0.0; o * patch]);
            let mut cols = vec![0.0; patch * pos];
            let mut dcols = vec![0.0; patch * pos];
            for bi in 0..bsz {
                let gb = &g.data()[bi * o * pos..(bi + 1) * o * pos];
                if let Some(gw) = gw.as_mut() {
                    kernels::im2col(xv.row(bi), &geom, &mut cols);
                    kernels::gemm(o, pos, patch, gb, false, &cols, true, 1.0, gw);
                }
                if let Some(gx) = gx.as_mut() {
                    kernels::gemm(patch, o, pos, wv.data(), true, gb, false, 0.0, &mut dcols);
                    kernels::col2im(&dcols, &geom, &mut gx[bi * c * h * w..(bi + 1) * c * h * w]);
                }
            }
            let mut grads = vec![
                gx.map(|d| Tensor::from_parts(vec![bsz, c, h, w], d)),
                gw.map(|d| Tensor::from_parts(vec![o, c, kh, kw], d)),
            ];
            if need.len() > 2 {
                grads.push(need[2].then(|| {
                    let mut d = vec![0.0; o];
                    for bi in 0..bsz {
                        for oi in 0..o {
                            let s = (bi * o + oi) * pos;
                            d[oi] += g.data()[s..s + pos].iter().sum::<f64>();
                        }
                    }
                    Tensor::from_parts(vec![o], d)
                }));
            }
            grads
        });
        let tensor = Tensor::from_parts(vec![bsz, o, geom.ho, geom.wo], out);
        Ok(match bias {
            Some(b) => self.tape().push_op(tensor, &[self, weight, b], backward),
            None => self.tape().push_op(tensor, &[self, weight], backward),
        })
    }

    /// Per-sample cross-entropy of `[B, k]` logits, via max-shifted
    /// log-sum-exp. Returns `[B]`.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if v.ndim() != 2 || v.shape()[0] != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", v.shape(), &[labels.len()]));
        }
        let k = v.shape()[1];
        check_labels(labels, k)?;
        let mut losses = Vec::with_capacity(labels.len());
        let mut probs = Vec::with_capacity(v.len());
        for (r, &y) in labels.iter().enumerate() {
            let row = v.row(r);
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            let lse = m + z.ln();
            losses.push(lse - row[y]);
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
        }
        let labels = labels.to_vec();
        let shape = v.shape().to_vec();
        Ok(self.tape().push_op(
            Tensor::vector(losses),
            &[self],
            Box::new(move |g, _| {
                let mut d = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    d[r * k + y] -= 1.0;
                    let gr = g.data()[r];
                    d[r * k..(r + 1) * k].iter_mut().for_each(|v| *v *= gr);
                }
                vec![Some(Tensor::from_parts(shape.clone(), d))]
            }),
        ))
    }

    /// Picks column `labels[b]` of each row of `[B, k]`, giving `[B, 1]`.
    pub fn gather_labels(self, labels: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if v.ndim() != 2 || v.shape()[0] != labels.len() {
            return Err(Error::shape("gather_labels", v.shape(), &[labels.len()]));
        }
        let k = v.shape()[1];
        check_labels(labels, k)?;
        let out: Vec<f64> = labels.iter().enumerate().map(|(r, &y)| v.row(r)[y]).collect();
        let labels = labels.to_vec();
        let shape = v.shape().to_vec();
        Ok(self.tape().push_op(
            Tensor::from_parts(vec![labels.len(), 1], out),
            &[self],
            Box::new(move |g, _| {
                let mut d = vec![0.0; shape[0] * k];
                for (r, &y) in labels.iter().enumerate() {
                    d[r * k + y] = g.data()[r];
                }
                vec![Some(Tensor::from_parts(shape.clone(), d))]
            }),
        ))
    }

    /// For `W: [k, h]`, builds `[B, k, h]` with slice `b` equal to
    /// `W[labels[b]] - W[i]` in row `i`.
    pub fn label_row_diff(self, labels: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if v.ndim() != 2 {
            return Err(Error::shape("label_row_diff", v.shape(), &[labels.len()]));
        }
        let (k, h) = (v.shape()[0], v.shape()[1]);
        check_labels(labels, k)?;
        let mut out = Vec::with_capacity(labels.len() * k * h);
        for &y in labels {
            let wy = v.row(y);
            for i in 0..k {
                out.extend(wy.iter().zip(v.row(i)).map(|(a, b)| a - b));
            }
        }
        let labels = labels.to_vec();
        Ok(self.tape().push_op(
            Tensor::from_parts(vec![labels.len(), k, h], out),
            &[self],
            Box::new(move |g, _| {
                let mut d = vec![0.0; k * h];
                for (b, &y) in labels.iter().enumerate() {
                    for i in 0..k {
                        let gs = &g.data()[(b * k + i) * h..(b * k + i + 1) * h];
                        for j in 0..h {
                            d[y * h + j] += gs[j];
                            d[i * h + j] -= gs[j];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![k, h], d))]
            }),
        ))
    }

    /// Batched matrix-vector product: `[B, k, h] x [B, h] -> [B, k]`.
    pub fn bmv(self, v: Var<'t>) -> Result<Var<'t>> {
        let (av, vv) = (self.value(), v.value());
        if av.ndim() != 3 || vv.ndim() != 2 || av.shape()[0] != vv.shape()[0] || av.shape()[2] != vv.shape()[1] {
            return Err(Error::shape("bmv", av.shape(), vv.shape()));
        }
        let (bsz, k, h) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let mut out = vec![0.0; bsz * k];
        for b in 0..bsz {
            let x = vv.row(b);
            for i in 0..k {
                let row = &av.data()[(b * k + i) * h..(b * k + i + 1) * h];
                out[b * k + i] = row.iter().zip(x).map(|(a, c)| a * c).sum();
            }
        }
        Ok(self.tape().push_op(
            Tensor::from_parts(vec![bsz, k], out),
            &[self, v],
            Box::new(move |g, need| {
                let ga = need[0].then(|| {
                    let mut d = vec![0.0; bsz * k * h];
                    for b in 0..bsz {
                        let x = vv.row(b);
                        for i in 0..k {
                            let gi = g.data()[b * k + i];
                            let dst = &mut d[(b * k + i) * h..(b * k + i + 1) * h];
                            dst.iter_mut().zip(x).for_each(|(o, &xv)| *o = gi * xv);
                        }
                    }
                    Tensor::from_parts(vec![bsz, k, h], d)
                });
                let gv = need[1].then(|| {
                    let mut d = vec![0.0; bsz * h];
                    for b in 0..bsz {
                        for i in 0..k {
                            let gi = g.data()[b * k + i];
                            let row = &av.data()[(b * k + i) * h..(b * k + i + 1) * h];
                            d[b * h..(b + 1) * h]
                                .iter_mut()
                                .zip(row)
                                .for_each(|(o, &a)| *o += gi * a);
                        }
                    }
                    Tensor::from_parts(vec![bsz, h], d)
                });
                vec![ga, gv]
            }),
        ))
    }
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= num_classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, num_classes }),
        None => Ok(()),
    }
}
