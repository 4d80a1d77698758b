//! Forward and backward kernels for the five operator kinds.
//!
//! All kernels are plain nested loops in a fixed order: values are stored
//! as f32, every reduction accumulates in f64 and rounds once on store.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn dims4(t: &Tensor, context: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape_mismatch(context, "4-d tensor", t.shape())),
    }
}

/// Cross-correlation plus per-filter bias.
///
/// `input` is [N, C, H, W], `weights` [F, C, kh, kw], `bias` [F]; output is
/// [N, F, H', W'] with H' = (H + 2*pad - kh) / stride + 1.
pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = dims4(input, "conv2d input")?;
    let (f, wc, kh, kw) = dims4(weights, "conv2d weights")?;
    if wc != c {
        return Err(Error::shape_mismatch(
            "conv2d input channels",
            format!("weights {:?}", weights.shape()),
            format!("input {:?}", input.shape()),
        ));
    }
    if bias.shape() != [f] {
        return Err(Error::shape_mismatch("conv2d bias", [f], bias.shape()));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be >= 1".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::shape_mismatch(
            "conv2d spatial extent",
            format!("at least {kh}x{kw} after padding"),
            (h, w),
        ));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;

    let x = input.data();
    let wgt = weights.data();
    let b = bias.data();
    let mut out = vec![0.0f32; n * f * oh * ow];
    // Hoisted-weight direct convolution: for each kernel tap, sweep the
    // contiguous output range it touches. Per output element the terms
    // still arrive in (ci, ky, kx) order after the bias.
    let mut acc = vec![0.0f64; oh * ow];
    for in_ in 0..n {
        let x_img = &x[in_ * c * h * w..][..c * h * w];
        for fo in 0..f {
            acc.fill(b[fo] as f64);
            let w_f = &wgt[fo * c * kh * kw..][..c * kh * kw];
            for ci in 0..c {
                let x_ch = &x_img[ci * h * w..][..h * w];
                let w_ch = &w_f[ci * kh * kw..][..kh * kw];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = out_span(ky, pad, stride, h, oh);
                    for kx in 0..kw {
                        let wv = w_ch[ky * kw + kx] as f64;
                        let (ox_lo, ox_hi) = out_span(kx, pad, stride, w, ow);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let row = &x_ch[iy * w..][..w];
                            let acc_row = &mut acc[oy * ow..][..ow];
                            if stride == 1 {
                                let xs = &row[ox_lo + kx - pad..ox_hi + kx - pad];
                                for (a, &xv) in acc_row[ox_lo..ox_hi].iter_mut().zip(xs) {
                                    *a += wv * xv as f64;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    acc_row[ox] += wv * row[ox * stride + kx - pad] as f64;
                                }
                            }
                        }
                    }
                }
            }
            let out_map = &mut out[(in_ * f + fo) * oh * ow..][..oh * ow];
            for (o, &a) in out_map.iter_mut().zip(&acc) {
                *o = a as f32;
            }
        }
    }
    Tensor::new(vec![n, f, oh, ow], out)
}

/// Gradients of conv2d with respect to input, weights, and bias.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    out_grad: &Tensor,
    stride: usize,
    pad: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (n, c, h, w) = match *input.shape() {
        [n, c, h, w] => (n, c, h, w),
        _ => unreachable!("validated in forward"),
    };
    let (f, _, kh, kw) = match *weights.shape() {
        [f, c2, kh, kw] => (f, c2, kh, kw),
        _ => unreachable!("validated in forward"),
    };
    let (oh, ow) = match *out_grad.shape() {
        [_, _, oh, ow] => (oh, ow),
        _ => unreachable!("validated in forward"),
    };

    let x = input.data();
    let wgt = weights.data();
    let g = out_grad.data();
    let mut din = vec![0.0f64; x.len()];
    let mut dw = vec![0.0f64; wgt.len()];
    let mut db = vec![0.0f64; f];
    for in_ in 0..n {
        let x_img = &x[in_ * c * h * w..][..c * h * w];
        let din_img = &mut din[in_ * c * h * w..][..c * h * w];
        for fo in 0..f {
            let w_f = &wgt[fo * c * kh * kw..][..c * kh * kw];
            let dw_f = &mut dw[fo * c * kh * kw..][..c * kh * kw];
            let g_map = &g[(in_ * f + fo) * oh * ow..][..oh * ow];
            for &gv in g_map {
                db[fo] += gv as f64;
            }
            for ci in 0..c {
                let x_ch = &x_img[ci * h * w..][..h * w];
                let din_ch = &mut din_img[ci * h * w..][..h * w];
                let w_ch = &w_f[ci * kh * kw..][..kh * kw];
                let dw_ch = &mut dw_f[ci * kh * kw..][..kh * kw];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = out_span(ky, pad, stride, h, oh);
                    for kx in 0..kw {
                        let wv = w_ch[ky * kw + kx] as f64;
                        let (ox_lo, ox_hi) = out_span(kx, pad, stride, w, ow);
                        let mut dw_acc = 0.0f64;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let xs = &x_ch[iy * w..][..w];
                            let dxs = &mut din_ch[iy * w..][..w];
                            let gs = &g_map[oy * ow..][..ow];
                            if stride == 1 {
                                let base = ox_lo + kx - pad;
                                let span = ox_hi - ox_lo;
                                let xs = &xs[base..base + span];
                                let dxs = &mut dxs[base..base + span];
                                let gs = &gs[ox_lo..ox_hi];
                                for i in 0..span {
                                    let go = gs[i] as f64;
                                    dw_acc += go * xs[i] as f64;
                                    dxs[i] += go * wv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let go = gs[ox] as f64;
                                    let ix = ox * stride + kx - pad;
                                    dw_acc += go * xs[ix] as f64;
                                    dxs[ix] += go * wv;
                                }
                            }
                        }
                        dw_ch[ky * kw + kx] += dw_acc;
                    }
                }
            }
        }
    }
    (round(din), round(dw), round(db))
}

/// Fully connected layer: input flattened to [N, In], weights [U, In].
pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = input.shape()[0];
    let in_features: usize = input.shape()[1..].iter().product();
    let (units, w_in) = match *weights.shape() {
        [u, i] => (u, i),
        _ => {
            return Err(Error::shape_mismatch(
                "dense weights",
                "2-d tensor",
                weights.shape(),
            ))
        }
    };
    if w_in != in_features {
        return Err(Error::shape_mismatch(
            "dense input features",
            format!("weights {:?}", weights.shape()),
            format!("input {:?}", input.shape()),
        ));
    }
    if bias.shape() != [units] {
        return Err(Error::shape_mismatch("dense bias", [units], bias.shape()));
    }
    let x = input.data();
    let wgt = weights.data();
    let b = bias.data();
    let mut out = vec![0.0f32; n * units];
    for in_ in 0..n {
        for u in 0..units {
            let mut acc = b[u] as f64;
            for i in 0..in_features {
                acc += x[in_ * in_features + i] as f64 * wgt[u * in_features + i] as f64;
            }
            out[in_ * units + u] = acc as f32;
        }
    }
    Tensor::new(vec![n, units], out)
}

pub fn dense_backward(
    input: &Tensor,
    weights: &Tensor,
    out_grad: &Tensor,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let n = input.shape()[0];
    let in_features: usize = input.shape()[1..].iter().product();
    let units = weights.shape()[0];
    let x = input.data();
    let wgt = weights.data();
    let g = out_grad.data();
    let mut din = vec![0.0f64; x.len()];
    let mut dw = vec![0.0f64; wgt.len()];
    let mut db = vec![0.0f64; units];
    for in_ in 0..n {
        for u in 0..units {
            let go = g[in_ * units + u] as f64;
            db[u] += go;
            for i in 0..in_features {
                dw[u * in_features + i] += go * x[in_ * in_features + i] as f64;
                din[in_ * in_features + i] += go * wgt[u * in_features + i] as f64;
            }
        }
    }
    (round(din), round(dw), round(db))
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

/// Gradient is passed through where the pre-activation is strictly
/// positive; exactly zero elsewhere (including at 0).
pub fn relu_backward(input: &Tensor, out_grad: &Tensor) -> Vec<f32> {
    input
        .data()
        .iter()
        .zip(out_grad.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect()
}

/// Non-overlapping max pooling. Returns the pooled tensor and the flat
/// input index of each window maximum (first occurrence wins ties).
pub fn maxpool_forward(input: &Tensor, size: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = dims4(input, "maxpool input")?;
    if size == 0 || h < size || w < size {
        return Err(Error::shape_mismatch(
            "maxpool window",
            format!("input at least {size}x{size}"),
            (h, w),
        ));
    }
    let oh = h / size;
    let ow = w / size;
    let x = input.data();
    let mut out = vec![0.0f32; n * c * oh * ow];
    let mut argmax = vec![0usize; out.len()];
    for in_ in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..size {
                        for kx in 0..size {
                            let iy = oy * size + ky;
                            let ix = ox * size + kx;
                            let idx = ((in_ * c + ci) * h + iy) * w + ix;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ((in_ * c + ci) * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

pub fn maxpool_backward(input_len: usize, argmax: &[usize], out_grad: &Tensor) -> Vec<f32> {
    let mut din = vec![0.0f64; input_len];
    for (o, &g) in out_grad.data().iter().enumerate() {
        din[argmax[o]] += g as f64;
    }
    round(din)
}

/// Mean softmax cross-entropy over the batch. Returns the scalar loss and
/// the per-example class probabilities (kept in f64 for the backward pass).
pub fn softmax_xent_forward(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (n, k) = match *logits.shape() {
        [n, k] => (n, k),
        _ => {
            return Err(Error::shape_mismatch(
                "softmax logits",
                "2-d tensor",
                logits.shape(),
            ))
        }
    };
    if labels.len() != n {
        return Err(Error::shape_mismatch("softmax labels", n, labels.len()));
    }
    let z = logits.data();
    let mut probs = vec![0.0f64; n * k];
    let mut loss = 0.0f64;
    for in_ in 0..n {
        let label = labels[in_];
        if label >= k {
            return Err(Error::InvalidLabel {
                label,
                num_classes: k,
            });
        }
        let row = &z[in_ * k..(in_ + 1) * k];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
        let mut sum = 0.0f64;
        for (j, &v) in row.iter().enumerate() {
            let e = ((v as f64) - m).exp();
            probs[in_ * k + j] = e;
            sum += e;
        }
        for p in &mut probs[in_ * k..(in_ + 1) * k] {
            *p /= sum;
        }
        loss += sum.ln() - (row[label] as f64 - m);
    }
    Ok((loss / n as f64, probs))
}

/// d(mean loss)/d(logits).
pub fn softmax_xent_backward(probs: &[f64], labels: &[usize], k: usize) -> Vec<f32> {
    let n = labels.len();
    let mut dz = vec![0.0f32; n * k];
    for in_ in 0..n {
        for j in 0..k {
            let indicator = if j == labels[in_] { 1.0 } else { 0.0 };
            dz[in_ * k + j] = ((probs[in_ * k + j] - indicator) / n as f64) as f32;
        }
    }
    dz
}

fn round(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

/// Output index range [lo, hi) whose input coordinate
/// `o * stride + k_off - pad` stays inside [0, in_extent) for one kernel
/// tap offset.
fn out_span(
    k_off: usize,
    pad: usize,
    stride: usize,
    in_extent: usize,
    out_extent: usize,
) -> (usize, usize) {
    let lo = pad.saturating_sub(k_off).div_ceil(stride).min(out_extent);
    let hi = if in_extent + pad > k_off {
        ((in_extent + pad - k_off - 1) / stride + 1).min(out_extent)
    } else {
        lo
    };
    (lo, hi.max(lo))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_scalar_product() {
        let input = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let weight = Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        let bias = Tensor::new(vec![1], vec![0.0]).unwrap();
        let out = conv2d_forward(&input, &weight, &bias, 1, 0).unwrap();
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn conv_zero_weights_zero_output() {
        let input = Tensor::new(vec![1, 2, 3, 3], (0..18).map(|v| v as f32).collect()).unwrap();
        let weight = Tensor::zeros(vec![2, 2, 2, 2]);
        let bias = Tensor::zeros(vec![2]);
        let out = conv2d_forward(&input, &weight, &bias, 1, 0).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_nine_term_sum_plus_bias() {
        let input = Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let weight = Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let bias = Tensor::new(vec![1], vec![1.0]).unwrap();
        let out = conv2d_forward(&input, &weight, &bias, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[10.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = Tensor::zeros(vec![1, 3, 4, 4]);
        let weight = Tensor::zeros(vec![2, 2, 3, 3]);
        let bias = Tensor::zeros(vec![2]);
        let err = conv2d_forward(&input, &weight, &bias, 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 2, 3, 3]") && msg.contains("[1, 3, 4, 4]"), "{msg}");
    }

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        let logits = Tensor::zeros(vec![3, 10]);
        let (loss, _) = softmax_xent_forward(&logits, &[0, 5, 9]).unwrap();
        assert!((loss - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_softmax_loss_vanishes() {
        let mut logits = Tensor::zeros(vec![1, 4]);
        logits.data_mut()[2] = 80.0;
        let (loss, _) = softmax_xent_forward(&logits, &[2]).unwrap();
        assert!(loss < 1e-12, "loss = {loss}");
    }

    #[test]
    fn softmax_rejects_out_of_range_label() {
        let logits = Tensor::zeros(vec![1, 4]);
        assert!(matches!(
            softmax_xent_forward(&logits, &[4]),
            Err(Error::InvalidLabel { .. })
        ));
    }

    #[test]
    fn relu_gradient_zero_on_dead_region() {
        let input = Tensor::new(vec![4], vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let grad = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        assert_eq!(relu_backward(&input, &grad), vec![0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn maxpool_ties_take_first_index() {
        let input = Tensor::new(vec![1, 1, 2, 2], vec![3.0, 3.0, 1.0, 3.0]).unwrap();
        let (out, argmax) = maxpool_forward(&input, 2).unwrap();
        assert_eq!(out.data(), &[3.0]);
        assert_eq!(argmax, vec![0]);
    }

    #[test]
    fn dense_matches_hand_dot_product() {
        let input = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let weight = Tensor::new(vec![2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap();
        let bias = Tensor::new(vec![2], vec![10.0, 0.0]).unwrap();
        let out = dense_forward(&input, &weight, &bias).unwrap();
        assert_eq!(out.data(), &[8.0, 3.0]);
    }
}
