//! Independent reference implementations used as test oracles. Nothing here
//! calls the engine's masking, scoring or pruning code; masks are realized by
//! zeroing weights and every count is recomputed sample by sample.

#![allow(dead_code)]

pub mod gradcheck;

use carprune::trace::{PruneIteration, PruneTrace, StopReason};
use carprune::{
    argmax, FilterMask, FilterRef, ImportanceIndex, LabeledDataset, LayerParams, LayerSpec, Network, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Quadruple loop with the engine's summation order: bias, then c, u, v ascending.
pub fn conv2d_oracle(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [b, c, h, w] = input.shape().try_into().unwrap();
    let [f, c2, kh, kw] = weight.shape().try_into().unwrap();
    assert_eq!(c, c2);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let (x, wt) = (input.data(), weight.data());
    let mut out = vec![0.0f32; b * f * oh * ow];
    for bi in 0..b {
        for fi in 0..f {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.data()[fi];
                    for ci in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let iy = (y * stride + u) as isize - pad as isize;
                                let ix = (xo * stride + v) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((bi * c + ci) * h + iy as usize) * w + ix as usize];
                                acc += wt[((fi * c + ci) * kh + u) * kw + v] * xv;
                            }
                        }
                    }
                    out[((bi * f + fi) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, f, oh, ow], out).unwrap()
}

/// Copy of `net` with the weights and bias of every masked filter set to zero.
pub fn zeroed_clone(net: &Network, mask: &FilterMask) -> Network {
    let mut params: Vec<Option<LayerParams>> = net.params().to_vec();
    for r in mask.iter() {
        let p = params[r.layer].as_mut().unwrap();
        let per = p.weight.len() / p.weight.shape()[0];
        p.weight.data_mut()[r.filter * per..(r.filter + 1) * per].fill(0.0);
        p.bias.data_mut()[r.filter] = 0.0;
    }
    Network::new(net.input_shape().to_vec(), net.layers().to_vec(), params).unwrap()
}

/// Per-class correct counts, one forward pass per sample.
pub fn per_sample_correct(net: &Network, data: &LabeledDataset) -> Vec<u64> {
    let mut correct = vec![0u64; net.class_count()];
    let none = FilterMask::new();
    for i in 0..data.len() {
        let x = data.images().slice_batch(i, i + 1);
        let logits = net.forward(&x, &none).unwrap();
        if argmax(logits.data()) == data.labels()[i] {
            correct[data.labels()[i]] += 1;
        }
    }
    correct
}

pub struct BruteCar {
    pub filter: FilterRef,
    pub baseline_correct: Vec<u64>,
    pub masked_correct: Vec<u64>,
}

impl BruteCar {
    pub fn delta(&self) -> i64 {
        self.baseline_correct.iter().sum::<u64>() as i64 - self.masked_correct.iter().sum::<u64>() as i64
    }

    pub fn score(&self, n: usize) -> f64 {
        let n = n as f64;
        self.baseline_correct.iter().sum::<u64>() as f64 / n - self.masked_correct.iter().sum::<u64>() as f64 / n
    }
}

/// CAR of each unmasked filter of `layer` by re-evaluating a zeroed copy.
pub fn brute_car(net: &Network, data: &LabeledDataset, layer: usize, applied: &FilterMask) -> Vec<BruteCar> {
    let base = per_sample_correct(&zeroed_clone(net, applied), data);
    (0..net.filter_count(layer).unwrap())
        .map(|f| FilterRef::new(layer, f))
        .filter(|r| !applied.contains(r))
        .map(|r| BruteCar {
            filter: r,
            baseline_correct: base.clone(),
            masked_correct: per_sample_correct(&zeroed_clone(net, &applied.with(r)), data),
        })
        .collect()
}

/// Parameter count after removing masked filters, by closed-form arithmetic.
pub fn closed_form_params(net: &Network, mask: &FilterMask) -> usize {
    let shapes = net.activation_shapes();
    let mut channels_in = net.input_shape()[0];
    let mut total = 0;
    for (i, spec) in net.layers().iter().enumerate() {
        match *spec {
            LayerSpec::Conv2d {
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => {
                let kept = out_channels - mask.filters_in(i).len();
                total += kept * channels_in * kernel_h * kernel_w + kept;
                channels_in = kept;
            }
            LayerSpec::Flatten => {
                let plane: usize = shapes[i][1..].iter().product();
                channels_in *= plane;
            }
            LayerSpec::Dense { out_features, .. } => {
                total += out_features * channels_in + out_features;
                channels_in = out_features;
            }
            _ => {}
        }
    }
    total
}

/// Straightforward greedy loop: rescore everything with zeroed copies every
/// iteration, pick the lowest (delta, layer, filter), stop below the band.
pub fn greedy_reference(net: &Network, data: &LabeledDataset, layers: &[usize], rho: f64) -> PruneTrace {
    let n = data.len();
    let baseline: u64 = per_sample_correct(net, data).iter().sum();
    let mut mask = FilterMask::new();
    let mut current = baseline;
    let mut iterations = Vec::new();
    let stop_reason = loop {
        let mut best: Option<(i64, FilterRef, BruteCar)> = None;
        for &l in layers {
            if net.filter_count(l).unwrap() - mask.filters_in(l).len() <= 1 {
                continue;
            }
            for c in brute_car(net, data, l, &mask) {
                let key = (c.delta(), c.filter);
                if best.as_ref().is_none_or(|(d, f, _)| key < (*d, *f)) {
                    best = Some((key.0, key.1, c));
                }
            }
        }
        let Some((_, r, c)) = best else {
            break StopReason::NoCandidates;
        };
        let masked: u64 = c.masked_correct.iter().sum();
        if (masked as f64) < rho * baseline as f64 {
            break StopReason::ThresholdReached;
        }
        mask.insert(r);
        iterations.push(PruneIteration {
            iteration: iterations.len() + 1,
            pruned: r,
            score: c.score(n),
            accuracy_before: current as f64 / n as f64,
            accuracy_after_prune: masked as f64 / n as f64,
            accuracy_after_finetune: None,
            params_remaining: closed_form_params(net, &mask),
        });
        current = masked;
    };
    PruneTrace {
        index: ImportanceIndex::Car,
        baseline_accuracy: baseline as f64 / n as f64,
        baseline_correct: baseline,
        eval_samples: n as u64,
        params_initial: net.parameter_count(),
        iterations,
        stop_reason,
    }
}

/// Two-conv network: `f1` then `f2` filters of 3x3 on `1 x side x side` input.
pub fn toy_net(f1: usize, f2: usize, side: usize, seed: u64) -> Network {
    let after = ((side - 2) / 2 - 2) / 2;
    Network::init(
        vec![1, side, side],
        vec![
            LayerSpec::conv(f1, 1, 3),
            LayerSpec::Relu,
            LayerSpec::maxpool(2),
            LayerSpec::conv(f2, f1, 3),
            LayerSpec::Relu,
            LayerSpec::maxpool(2),
            LayerSpec::Flatten,
            LayerSpec::dense(10, f2 * after * after),
            LayerSpec::Softmax,
        ],
        seed,
    )
    .unwrap()
}

/// Random images labelled by `teacher`, with a fraction of labels replaced at random.
pub fn teacher_dataset(teacher: &Network, n: usize, noise: f64, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![n];
    shape.extend_from_slice(teacher.input_shape());
    let images = random_tensor(shape, &mut rng);
    let mut labels = carprune::predict(
        teacher,
        &LabeledDataset::new(images.clone(), vec![0; n], names(teacher.class_count())).unwrap(),
        &FilterMask::new(),
    )
    .unwrap();
    for l in labels.iter_mut() {
        if rng.gen_bool(noise) {
            *l = rng.gen_range(0..teacher.class_count());
        }
    }
    LabeledDataset::new(images, labels, names(teacher.class_count())).unwrap()
}

pub fn names(k: usize) -> Vec<String> {
    (0..k).map(|c| format!("class{c}")).collect()
}

/// Dataset of `per_class[c]` random images per class.
pub fn class_dataset(per_class: &[usize], shape: &[usize], seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = per_class
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    let mut full = vec![labels.len()];
    full.extend_from_slice(shape);
    LabeledDataset::new(random_tensor(full, &mut rng), labels, names(per_class.len())).unwrap()
}
