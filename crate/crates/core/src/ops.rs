//! Layer kernels: forward and backward passes over batched tensors.
//!
//! Convolution accumulates every output element in a fixed order: the bias
//! first, then `weight[f, c, u, v] * input[c, iy, ix]` for `c`, `u`, `v`
//! ascending (outermost to innermost). Taps that fall in the zero padding are
//! skipped. No fused multiply-add is used, so a direct four-deep loop with the
//! same order reproduces the output bit for bit.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn dims4(t: &Tensor, context: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(Error::Shape {
            context: format!("{context}: expected a rank-4 tensor"),
            expected: vec![0, 0, 0, 0],
            actual: t.shape().to_vec(),
        }),
    }
}

fn dims2(t: &Tensor, context: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [a, b] => Ok((a, b)),
        _ => Err(Error::Shape {
            context: format!("{context}: expected a rank-2 tensor"),
            expected: vec![0, 0],
            actual: t.shape().to_vec(),
        }),
    }
}

/// Output extent of a sliding window, or `None` if the window does not fit.
pub fn window_output(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output columns `ox` for which `ox * stride + tap - pad` lands inside `0..size`.
fn valid_span(tap: usize, pad: usize, stride: usize, size: usize, out: usize) -> (usize, usize) {
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    let hi = if size + pad > tap {
        ((size - 1 + pad - tap) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

struct ConvGeom {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    filters: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

fn conv_geom(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (batch, channels, height, width) = dims4(input, "conv2d input")?;
    let (filters, wc, kh, kw) = dims4(weight, "conv2d weight")?;
    if wc != channels {
        return Err(Error::Shape {
            context: "conv2d input channels".into(),
            expected: vec![batch, wc, height, width],
            actual: input.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be at least 1".into()));
    }
    let (oh, ow) = match (
        window_output(height, kh, stride, pad),
        window_output(width, kw, stride, pad),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::Shape {
                context: format!("conv2d kernel larger than padded input (pad {pad})"),
                expected: vec![kh, kw],
                actual: vec![height, width],
            })
        }
    };
    Ok(ConvGeom {
        batch,
        channels,
        height,
        width,
        filters,
        kh,
        kw,
        oh,
        ow,
        stride,
        pad,
    })
}

/// Direct 2-D convolution (cross-correlation) of a `B x C x H x W` batch.
pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv_geom(input, weight, stride, pad)?;
    if bias.len() != g.filters {
        return Err(Error::Shape {
            context: "conv2d bias".into(),
            expected: vec![g.filters],
            actual: bias.shape().to_vec(),
        });
    }
    let x = input.data();
    let w = weight.data();
    let plane_in = g.height * g.width;
    let plane_out = g.oh * g.ow;
    let mut out = vec![0.0f32; g.batch * g.filters * plane_out];

    for (bi, sample_out) in out.chunks_exact_mut(g.filters * plane_out).enumerate() {
        let sample = &x[bi * g.channels * plane_in..(bi + 1) * g.channels * plane_in];
        for (fi, o) in sample_out.chunks_exact_mut(plane_out).enumerate() {
            o.fill(bias.data()[fi]);
            for ci in 0..g.channels {
                let plane = &sample[ci * plane_in..(ci + 1) * plane_in];
                for u in 0..g.kh {
                    for v in 0..g.kw {
                        let wv = w[((fi * g.channels + ci) * g.kh + u) * g.kw + v];
                        let (ox0, ox1) = valid_span(v, g.pad, g.stride, g.width, g.ow);
                        for oy in 0..g.oh {
                            let iy = oy * g.stride + u;
                            if iy < g.pad || iy - g.pad >= g.height {
                                continue;
                            }
                            let irow = &plane[(iy - g.pad) * g.width..][..g.width];
                            let orow = &mut o[oy * g.ow..][..g.ow];
                            if g.stride == 1 {
                                let ix0 = ox0 + v - g.pad;
                                for (ov, iv) in orow[ox0..ox1].iter_mut().zip(&irow[ix0..]) {
                                    *ov += wv * *iv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * irow[ox * g.stride + v - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.batch, g.filters, g.oh, g.ow], out)
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    d_out: &Tensor,
    need_input_grad: bool,
) -> Result<ConvGrads> {
    let g = conv_geom(input, weight, stride, pad)?;
    if d_out.shape() != [g.batch, g.filters, g.oh, g.ow] {
        return Err(Error::Shape {
            context: "conv2d output gradient".into(),
            expected: vec![g.batch, g.filters, g.oh, g.ow],
            actual: d_out.shape().to_vec(),
        });
    }
    let x = input.data();
    let w = weight.data();
    let dy = d_out.data();
    let plane_in = g.height * g.width;
    let plane_out = g.oh * g.ow;
    let mut dw = vec![0.0f32; w.len()];
    let mut db = vec![0.0f32; g.filters];
    let mut dx = if need_input_grad {
        vec![0.0f32; x.len()]
    } else {
        Vec::new()
    };

    for bi in 0..g.batch {
        for fi in 0..g.filters {
            let o = &dy[(bi * g.filters + fi) * plane_out..][..plane_out];
            db[fi] += o.iter().sum::<f32>();
            for ci in 0..g.channels {
                let in_off = (bi * g.channels + ci) * plane_in;
                for u in 0..g.kh {
                    for v in 0..g.kw {
                        let widx = ((fi * g.channels + ci) * g.kh + u) * g.kw + v;
                        let wv = w[widx];
                        let (ox0, ox1) = valid_span(v, g.pad, g.stride, g.width, g.ow);
                        let mut acc = 0.0f32;
                        for oy in 0..g.oh {
                            let iy = oy * g.stride + u;
                            if iy < g.pad || iy - g.pad >= g.height {
                                continue;
                            }
                            let row = in_off + (iy - g.pad) * g.width;
                            let orow = &o[oy * g.ow..][..g.ow];
                            for (ox, &go) in (ox0..ox1).zip(&orow[ox0..ox1]) {
                                let ix = row + ox * g.stride + v - g.pad;
                                acc += go * x[ix];
                                if need_input_grad {
                                    dx[ix] += wv * go;
                                }
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: if need_input_grad {
            Some(Tensor::new(input.shape().to_vec(), dx)?)
        } else {
            None
        },
        weight: Tensor::new(weight.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![g.filters], db)?,
    })
}

/// NaN and -0.0 both become +0.0.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn relu_inplace(t: &mut Tensor) {
    for v in t.data_mut() {
        if !(*v > 0.0) {
            *v = 0.0;
        }
    }
}

/// Zeroes the gradient wherever the forward output of the ReLU was zero.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn relu_backward(output: &Tensor, d_out: &mut Tensor) {
    for (g, y) in d_out.data_mut().iter_mut().zip(output.data()) {
        if !(*y > 0.0) {
            *g = 0.0;
        }
    }
}

/// Max pooling without padding. Returns the pooled tensor and, for every
/// output element, the flat input index it was taken from (first maximum in
/// scan order wins).
pub fn maxpool2d_forward(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<u32>)> {
    let (b, c, h, w) = dims4(input, "maxpool2d input")?;
    let (oh, ow) = match (window_output(h, window, stride, 0), window_output(w, window, stride, 0)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::Shape {
                context: "maxpool2d window larger than input".into(),
                expected: vec![window, window],
                actual: vec![h, w],
            })
        }
    };
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * stride * w + ox * stride;
                let mut best = x[best_idx];
                for u in 0..window {
                    for v in 0..window {
                        let idx = base + (oy * stride + u) * w + ox * stride + v;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    Ok((Tensor::new(vec![b, c, oh, ow], out)?, arg))
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[u32], d_out: &Tensor) -> Result<Tensor> {
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let data = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(d_out.data()) {
        data[idx as usize] += g;
    }
    Ok(dx)
}

/// `out[b, o] = bias[o] + sum_i weight[o, i] * input[b, i]`, summed with `i` ascending.
pub fn dense_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, n_in) = dims2(input, "dense input")?;
    let (n_out, w_in) = dims2(weight, "dense weight")?;
    if w_in != n_in || bias.len() != n_out {
        return Err(Error::Shape {
            context: "dense layer".into(),
            expected: vec![n_out, n_in],
            actual: vec![n_out, w_in, bias.len()],
        });
    }
    let x = input.data();
    let w = weight.data();
    let mut out = Vec::with_capacity(b * n_out);
    for row in x.chunks_exact(n_in) {
        for (o, wrow) in w.chunks_exact(n_in).enumerate() {
            let mut acc = bias.data()[o];
            for (wv, xv) in wrow.iter().zip(row) {
                acc += wv * xv;
            }
            out.push(acc);
        }
    }
    Tensor::new(vec![b, n_out], out)
}

pub struct DenseGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(input: &Tensor, weight: &Tensor, d_out: &Tensor) -> Result<DenseGrads> {
    let (b, n_in) = dims2(input, "dense input")?;
    let (n_out, _) = dims2(weight, "dense weight")?;
    if d_out.shape() != [b, n_out] {
        return Err(Error::Shape {
            context: "dense output gradient".into(),
            expected: vec![b, n_out],
            actual: d_out.shape().to_vec(),
        });
    }
    let x = input.data();
    let w = weight.data();
    let dy = d_out.data();
    let mut dw = vec![0.0f32; n_out * n_in];
    let mut db = vec![0.0f32; n_out];
    let mut dx = vec![0.0f32; b * n_in];
    for bi in 0..b {
        let xrow = &x[bi * n_in..][..n_in];
        let dxrow = &mut dx[bi * n_in..][..n_in];
        for o in 0..n_out {
            let g = dy[bi * n_out + o];
            db[o] += g;
            let wrow = &w[o * n_in..][..n_in];
            let dwrow = &mut dw[o * n_in..][..n_in];
            for i in 0..n_in {
                dwrow[i] += g * xrow[i];
                dxrow[i] += g * wrow[i];
            }
        }
    }
    Ok(DenseGrads {
        input: Tensor::new(vec![b, n_in], dx)?,
        weight: Tensor::new(vec![n_out, n_in], dw)?,
        bias: Tensor::new(vec![n_out], db)?,
    })
}

/// Row-wise softmax of a `B x K` logit matrix.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, k) = dims2(logits, "softmax")?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(k) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean cross-entropy of softmax(logits) against integer labels, and its
/// gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let (b, k) = dims2(logits, "cross entropy")?;
    if labels.len() != b {
        return Err(Error::Shape {
            context: "cross entropy labels".into(),
            expected: vec![b],
            actual: vec![labels.len()],
        });
    }
    let mut grad = softmax(logits)?;
    let mut total = 0.0f32;
    let scale = 1.0 / b as f32;
    for (bi, (&label, row)) in labels.iter().zip(logits.data().chunks_exact(k)).enumerate() {
        if label >= k {
            return Err(Error::LabelOutOfRange {
                index: bi,
                label,
                class_count: k,
            });
        }
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f32>().ln();
        total += lse - row[label];
        let g = &mut grad.data_mut()[bi * k..][..k];
        g[label] -= 1.0;
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    Ok((total * scale, grad))
}
