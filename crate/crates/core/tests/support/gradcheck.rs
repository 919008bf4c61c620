//! Central finite differences of an independent f64 forward pass, compared
//! against the engine's analytic gradients.

use carprune::train::gradients;
use carprune::{FilterMask, LayerSpec, Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::random_tensor;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
/// Step divisors tried in turn when a probe straddles a ReLU or max-pool kink.
const REFINEMENTS: [f64; 4] = [1.0, 16.0, 256.0, 4096.0];

/// f64 forward pass; returns mean cross-entropy and the ReLU/max-pool branch
/// pattern, so differences that straddle a kink can be recognized.
pub struct Reference {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Reference {
    pub fn new(net: &Network) -> Self {
        let widen = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<f64>>();
        Reference {
            input_shape: net.input_shape().to_vec(),
            layers: net.layers().to_vec(),
            params: net
                .params()
                .iter()
                .map(|p| p.as_ref().map(|p| (widen(&p.weight), widen(&p.bias))))
                .collect(),
        }
    }

    pub fn loss(&self, x: &[f64], batch: usize, labels: &[usize]) -> (f64, Vec<usize>) {
        let mut shape = vec![batch];
        shape.extend_from_slice(&self.input_shape);
        let mut a = x.to_vec();
        let mut pattern = Vec::new();
        for (i, spec) in self.layers.iter().enumerate() {
            match *spec {
                LayerSpec::Conv2d {
                    out_channels: f,
                    in_channels: c,
                    kernel_h: kh,
                    kernel_w: kw,
                    stride,
                    pad,
                } => {
                    let (w, b) = self.params[i].as_ref().unwrap();
                    let (h, wd) = (shape[2], shape[3]);
                    let oh = (h + 2 * pad - kh) / stride + 1;
                    let ow = (wd + 2 * pad - kw) / stride + 1;
                    let mut out = vec![0.0; batch * f * oh * ow];
                    for n in 0..batch {
                        for o in 0..f {
                            for y in 0..oh {
                                for xo in 0..ow {
                                    let mut s = b[o];
                                    for ci in 0..c {
                                        for u in 0..kh {
                                            for v in 0..kw {
                                                let iy = (y * stride + u) as isize - pad as isize;
                                                let ix = (xo * stride + v) as isize - pad as isize;
                                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                                    s += w[((o * c + ci) * kh + u) * kw + v]
                                                        * a[((n * c + ci) * h + iy as usize) * wd + ix as usize];
                                                }
                                            }
                                        }
                                    }
                                    out[((n * f + o) * oh + y) * ow + xo] = s;
                                }
                            }
                        }
                    }
                    a = out;
                    shape = vec![batch, f, oh, ow];
                }
                LayerSpec::Relu => {
                    for v in a.iter_mut() {
                        pattern.push((*v > 0.0) as usize);
                        *v = v.max(0.0);
                    }
                }
                LayerSpec::MaxPool2d { window, stride } => {
                    let (c, h, w) = (shape[1], shape[2], shape[3]);
                    let oh = (h - window) / stride + 1;
                    let ow = (w - window) / stride + 1;
                    let mut out = vec![0.0; batch * c * oh * ow];
                    for p in 0..batch * c {
                        for y in 0..oh {
                            for xo in 0..ow {
                                let mut best = (f64::NEG_INFINITY, 0);
                                for u in 0..window {
                                    for v in 0..window {
                                        let idx = (y * stride + u) * w + xo * stride + v;
                                        if a[p * h * w + idx] > best.0 {
                                            best = (a[p * h * w + idx], idx);
                                        }
                                    }
                                }
                                pattern.push(best.1);
                                out[(p * oh + y) * ow + xo] = best.0;
                            }
                        }
                    }
                    a = out;
                    shape = vec![batch, c, oh, ow];
                }
                LayerSpec::Flatten => shape = vec![batch, shape[1..].iter().product()],
                LayerSpec::Dense {
                    out_features,
                    in_features,
                } => {
                    let (w, b) = self.params[i].as_ref().unwrap();
                    let mut out = vec![0.0; batch * out_features];
                    for n in 0..batch {
                        for o in 0..out_features {
                            out[n * out_features + o] = b[o]
                                + (0..in_features)
                                    .map(|j| w[o * in_features + j] * a[n * in_features + j])
                                    .sum::<f64>();
                        }
                    }
                    a = out;
                    shape = vec![batch, out_features];
                }
                LayerSpec::Softmax => {}
            }
        }
        let k = shape[1];
        let loss = (0..batch)
            .map(|n| {
                let row = &a[n * k..(n + 1) * k];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - row[labels[n]]
            })
            .sum::<f64>()
            / batch as f64;
        (loss, pattern)
    }
}

/// Outcome of comparing every weight and bias entry.
#[derive(Debug, Default)]
pub struct GradCheck {
    pub loss_gap: f64,
    pub checked: usize,
    /// Entries checked with a reduced step because the full step crossed a kink.
    pub refined: usize,
    /// Entries where even the smallest step crossed a kink.
    pub skipped: usize,
    pub worst: f64,
    pub violations: Vec<String>,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.loss_gap < 1e-5 && self.skipped == 0
    }
}

/// Two convs (strided and padded), ReLU, max-pool, dense: every op with parameters or kinks.
pub fn small_network() -> Network {
    Network::init(
        vec![2, 9, 9],
        vec![
            LayerSpec::Conv2d {
                out_channels: 3,
                in_channels: 2,
                kernel_h: 3,
                kernel_w: 3,
                stride: 2,
                pad: 1,
            },
            LayerSpec::Relu,
            LayerSpec::maxpool(2),
            LayerSpec::Conv2d {
                out_channels: 4,
                in_channels: 3,
                kernel_h: 2,
                kernel_w: 2,
                stride: 1,
                pad: 1,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::dense(5, 4 * 3 * 3),
            LayerSpec::Softmax,
        ],
        31,
    )
    .unwrap()
}

pub fn random_batch(batch: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(vec![batch, 2, 9, 9], &mut rng);
    let labels = (0..batch).map(|_| rng.gen_range(0..5)).collect();
    (x, labels)
}

/// Central differences need both probes on the same ReLU/max-pool branch; the
/// step shrinks until they are.
pub fn gradient_check(net: &Network, batch: &Tensor, labels: &[usize]) -> GradCheck {
    let n = labels.len();
    let (loss, grads) = gradients(net, batch, labels, &FilterMask::new()).unwrap();
    let reference = Reference::new(net);
    let x: Vec<f64> = batch.data().iter().map(|&v| v as f64).collect();
    let mut out = GradCheck {
        loss_gap: (reference.loss(&x, n, labels).0 - loss as f64).abs(),
        ..GradCheck::default()
    };
    for (layer, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        for (role, analytic) in [(0, g.weight.data()), (1, g.bias.data())] {
            if analytic.is_empty() {
                out.violations
                    .push(format!("layer {layer} role {role}: empty gradient"));
            }
            for (j, &a) in analytic.iter().enumerate() {
                let perturbed = |delta: f64| {
                    let mut r = Reference::new(net);
                    let (w, b) = r.params[layer].as_mut().unwrap();
                    if role == 0 {
                        w[j] += delta;
                    } else {
                        b[j] += delta;
                    }
                    r.loss(&x, n, labels)
                };
                let Some((step, numeric)) = REFINEMENTS.iter().map(|r| STEP / r).find_map(|h| {
                    let (lp, pp) = perturbed(h);
                    let (lm, pm) = perturbed(-h);
                    (pp == pm).then(|| (h, (lp - lm) / (2.0 * h)))
                }) else {
                    out.skipped += 1;
                    continue;
                };
                out.refined += (step != STEP) as usize;
                let a = a as f64;
                let scale = a.abs().max(numeric.abs());
                let err = if scale < 1e-6 {
                    (a - numeric).abs()
                } else {
                    (a - numeric).abs() / scale
                };
                if err > TOLERANCE {
                    out.violations.push(format!(
                        "layer {layer} role {role} index {j}: analytic {a}, numeric {numeric}"
                    ));
                }
                out.worst = out.worst.max(err);
                out.checked += 1;
            }
        }
    }
    out
}
