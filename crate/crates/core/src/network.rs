//! Layer stacks, filter masks, masked forward passes and evaluation.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Samples per forward chunk during evaluation.
const EVAL_CHUNK: usize = 128;

/// One layer of a sequential network, with its hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        out_features: usize,
        in_features: usize,
    },
    Softmax,
}

impl LayerSpec {
    pub fn conv(out_channels: usize, in_channels: usize, kernel: usize) -> Self {
        LayerSpec::Conv2d {
            out_channels,
            in_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            pad: 0,
        }
    }

    pub fn maxpool(window: usize) -> Self {
        LayerSpec::MaxPool2d { window, stride: window }
    }

    pub fn dense(out_features: usize, in_features: usize) -> Self {
        LayerSpec::Dense {
            out_features,
            in_features,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. })
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }

    /// Expected `(weight, bias)` shapes for parameterized layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d {
                out_channels,
                in_channels,
                kernel_h,
                kernel_w,
                ..
            } => Some((vec![out_channels, in_channels, kernel_h, kernel_w], vec![out_channels])),
            LayerSpec::Dense {
                out_features,
                in_features,
            } => Some((vec![out_features, in_features], vec![out_features])),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |msg: String| Error::InvalidNetwork(format!("layer {index} ({}): {msg}", self.name()));
        match *self {
            LayerSpec::Conv2d {
                out_channels,
                in_channels,
                kernel_h,
                kernel_w,
                stride,
                pad,
            } => {
                let [c, h, w] = input else {
                    return Err(bad(format!("expects C x H x W input, got {input:?}")));
                };
                if *c != in_channels {
                    return Err(bad(format!("in_channels {in_channels} but input has {c} channels")));
                }
                if out_channels == 0 || stride == 0 {
                    return Err(bad("out_channels and stride must be positive".into()));
                }
                match (
                    ops::window_output(*h, kernel_h, stride, pad),
                    ops::window_output(*w, kernel_w, stride, pad),
                ) {
                    (Some(oh), Some(ow)) => Ok(vec![out_channels, oh, ow]),
                    _ => Err(bad(format!("kernel {kernel_h}x{kernel_w} does not fit input {h}x{w}"))),
                }
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2d { window, stride } => {
                let [c, h, w] = input else {
                    return Err(bad(format!("expects C x H x W input, got {input:?}")));
                };
                match (
                    ops::window_output(*h, window, stride, 0),
                    ops::window_output(*w, window, stride, 0),
                ) {
                    (Some(oh), Some(ow)) => Ok(vec![*c, oh, ow]),
                    _ => Err(bad(format!("window {window} does not fit input {h}x{w}"))),
                }
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Dense {
                out_features,
                in_features,
            } => match input {
                [n] if *n == in_features && out_features > 0 => Ok(vec![out_features]),
                _ => Err(bad(format!("in_features {in_features} but input is {input:?}"))),
            },
            LayerSpec::Softmax => match input {
                [_] => Ok(input.to_vec()),
                _ => Err(bad(format!("expects a flat input, got {input:?}"))),
            },
        }
    }
}

/// Weight and bias of a conv2d or dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// A filter: output channel `filter` of the conv2d layer at index `layer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FilterRef {
    pub layer: usize,
    pub filter: usize,
}

impl FilterRef {
    pub fn new(layer: usize, filter: usize) -> Self {
        Self { layer, filter }
    }
}

impl fmt::Display for FilterRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.layer, self.filter)
    }
}

/// A set of filters whose output channels are forced to zero.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FilterMask {
    entries: BTreeSet<FilterRef>,
}

impl FilterMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, r: FilterRef) -> bool {
        self.entries.insert(r)
    }

    pub fn remove(&mut self, r: &FilterRef) -> bool {
        self.entries.remove(r)
    }

    pub fn contains(&self, r: &FilterRef) -> bool {
        self.entries.contains(r)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &FilterRef> {
        self.entries.iter()
    }

    /// This mask plus one more filter.
    pub fn with(&self, r: FilterRef) -> FilterMask {
        let mut m = self.clone();
        m.insert(r);
        m
    }

    /// Masked filter indices in `layer`, ascending.
    pub fn filters_in(&self, layer: usize) -> Vec<usize> {
        self.entries
            .range(FilterRef::new(layer, 0)..FilterRef::new(layer + 1, 0))
            .map(|r| r.filter)
            .collect()
    }

    pub fn validate(&self, net: &Network) -> Result<()> {
        for r in &self.entries {
            net.check_filter(*r)?;
        }
        Ok(())
    }
}

impl FromIterator<FilterRef> for FilterMask {
    fn from_iter<I: IntoIterator<Item = FilterRef>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

/// A sequential convolutional classifier ending in a softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<Option<LayerParams>>,
    class_count: usize,
}

impl Network {
    /// Validates layer/parameter consistency and shape flow.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>, params: Vec<Option<LayerParams>>) -> Result<Self> {
        if layers.len() != params.len() {
            return Err(Error::InvalidNetwork(format!(
                "{} layers but {} parameter slots",
                layers.len(),
                params.len()
            )));
        }
        if input_shape.len() != 3 || input_shape.contains(&0) {
            return Err(Error::InvalidNetwork(format!(
                "input shape must be C x H x W, got {input_shape:?}"
            )));
        }
        let softmax_count = layers.iter().filter(|l| matches!(l, LayerSpec::Softmax)).count();
        if softmax_count != 1 || !matches!(layers.last(), Some(LayerSpec::Softmax)) {
            return Err(Error::InvalidNetwork(
                "network must end in exactly one softmax layer".into(),
            ));
        }
        for (i, (spec, p)) in layers.iter().zip(&params).enumerate() {
            match (spec.param_shapes(), p) {
                (Some((ws, bs)), Some(p)) => {
                    if p.weight.shape() != ws.as_slice() || p.bias.shape() != bs.as_slice() {
                        return Err(Error::Shape {
                            context: format!("parameters of layer {i} ({})", spec.name()),
                            expected: ws.into_iter().chain(bs).collect(),
                            actual: p.weight.shape().iter().chain(p.bias.shape()).copied().collect(),
                        });
                    }
                }
                (None, None) => {}
                (Some(_), None) => return Err(Error::InvalidNetwork(format!("layer {i} is missing parameters"))),
                (None, Some(_)) => {
                    return Err(Error::InvalidNetwork(format!(
                        "layer {i} ({}) takes no parameters",
                        spec.name()
                    )))
                }
            }
        }
        let mut shape = input_shape.clone();
        for (i, spec) in layers.iter().enumerate() {
            shape = spec.output_shape(i, &shape)?;
        }
        let class_count = shape[0];
        Ok(Self {
            input_shape,
            layers,
            params,
            class_count,
        })
    }

    /// Builds a network with He-style fan-in scaled uniform weights and zero biases.
    pub fn init(input_shape: Vec<usize>, layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layers
            .iter()
            .map(|spec| {
                spec.param_shapes().map(|(ws, bs)| {
                    let fan_in: usize = ws[1..].iter().product();
                    let bound = (6.0 / fan_in as f32).sqrt();
                    let n: usize = ws.iter().product();
                    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                    LayerParams {
                        weight: Tensor::new(ws, data).expect("shape product matches"),
                        bias: Tensor::zeros(bs),
                    }
                })
            })
            .collect();
        Self::new(input_shape, layers, params)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    pub fn layer_params(&self, layer: usize) -> Option<&LayerParams> {
        self.params.get(layer).and_then(Option::as_ref)
    }

    pub(crate) fn layer_params_mut(&mut self, layer: usize) -> Option<&mut LayerParams> {
        self.params.get_mut(layer).and_then(Option::as_mut)
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Indices of all conv2d layers.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_conv())
            .map(|(i, _)| i)
            .collect()
    }

    /// Number of filters in conv layer `layer`.
    pub fn filter_count(&self, layer: usize) -> Result<usize> {
        match self.layers.get(layer) {
            Some(LayerSpec::Conv2d { out_channels, .. }) => Ok(*out_channels),
            _ => Err(Error::NotConv(layer)),
        }
    }

    pub fn check_filter(&self, r: FilterRef) -> Result<()> {
        match self.layers.get(r.layer) {
            Some(LayerSpec::Conv2d { out_channels, .. }) if r.filter < *out_channels => Ok(()),
            Some(LayerSpec::Conv2d { out_channels, .. }) => Err(Error::InvalidFilter {
                layer: r.layer,
                filter: r.filter,
                reason: format!("layer has {out_channels} filters"),
            }),
            Some(other) => Err(Error::InvalidFilter {
                layer: r.layer,
                filter: r.filter,
                reason: format!("layer is {}, not conv2d", other.name()),
            }),
            None => Err(Error::InvalidFilter {
                layer: r.layer,
                filter: r.filter,
                reason: format!("network has {} layers", self.layers.len()),
            }),
        }
    }

    /// Per-sample activation shapes: entry `i` is the input to layer `i`; the
    /// last entry is the network output.
    pub fn activation_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = vec![self.input_shape.clone()];
        for (i, spec) in self.layers.iter().enumerate() {
            let next = spec
                .output_shape(i, shapes.last().unwrap())
                .expect("validated at construction");
            shapes.push(next);
        }
        shapes
    }

    /// The next conv2d or dense layer after `layer`.
    pub fn successor(&self, layer: usize) -> Option<usize> {
        (layer + 1..self.layers.len()).find(|&j| self.layers[j].is_parameterized())
    }

    /// The successor layer of conv filter `r` and the flat indices of that
    /// layer's weights which read `r`'s output channel.
    pub fn consumer_weights(&self, r: FilterRef) -> Result<(usize, Vec<usize>)> {
        self.check_filter(r)?;
        let next = self.successor(r.layer).ok_or(Error::NoSuccessor(r.layer))?;
        let indices = match self.layers[next] {
            LayerSpec::Conv2d {
                out_channels,
                in_channels,
                kernel_h,
                kernel_w,
                ..
            } => {
                let taps = kernel_h * kernel_w;
                (0..out_channels)
                    .flat_map(|o| {
                        let start = (o * in_channels + r.filter) * taps;
                        start..start + taps
                    })
                    .collect()
            }
            LayerSpec::Dense {
                out_features,
                in_features,
            } => {
                let channels = self.filter_count(r.layer)?;
                let plane = in_features / channels;
                (0..out_features)
                    .flat_map(|o| {
                        let start = o * in_features + r.filter * plane;
                        start..start + plane
                    })
                    .collect()
            }
            _ => unreachable!("successor is parameterized"),
        };
        Ok((next, indices))
    }

    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|p| p.weight.len() + p.bias.len())
            .sum()
    }

    /// Index one past the last layer that contributes to the logits.
    fn logits_end(&self) -> usize {
        self.layers.len() - 1
    }

    pub(crate) fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() != 4 || batch.shape()[1..] != self.input_shape[..] {
            let mut expected = vec![batch.shape().first().copied().unwrap_or(0)];
            expected.extend(&self.input_shape);
            return Err(Error::Shape {
                context: "network input batch".into(),
                expected,
                actual: batch.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Pre-softmax logits `B x class_count`, with masked filters' output
    /// channels zeroed immediately after their conv layer.
    pub fn forward(&self, batch: &Tensor, mask: &FilterMask) -> Result<Tensor> {
        self.check_batch(batch)?;
        mask.validate(self)?;
        self.run(batch.clone(), 0..self.logits_end(), mask)
    }

    /// Softmax probabilities for a batch.
    pub fn predict_proba(&self, batch: &Tensor, mask: &FilterMask) -> Result<Tensor> {
        ops::softmax(&self.forward(batch, mask)?)
    }

    /// Pre-activation response of conv layer `layer` (masks applied upstream only).
    pub fn conv_response(&self, batch: &Tensor, layer: usize, mask: &FilterMask) -> Result<Tensor> {
        self.check_batch(batch)?;
        self.filter_count(layer)?;
        let upstream = self.run(batch.clone(), 0..layer, mask)?;
        self.apply_layer(layer, upstream)
    }

    /// Applies layers in `range` to an activation batch, honouring the mask.
    pub(crate) fn run(&self, mut x: Tensor, range: Range<usize>, mask: &FilterMask) -> Result<Tensor> {
        for i in range {
            x = self.apply_layer(i, x)?;
            if self.layers[i].is_conv() {
                zero_channels(&mut x, &mask.filters_in(i));
            }
        }
        Ok(x)
    }

    /// Applies only the unmasked computation of layer `i`.
    pub(crate) fn apply_layer(&self, i: usize, mut x: Tensor) -> Result<Tensor> {
        match &self.layers[i] {
            LayerSpec::Conv2d { stride, pad, .. } => {
                let p = self.params[i].as_ref().expect("conv params");
                ops::conv2d_forward(&x, &p.weight, &p.bias, *stride, *pad)
            }
            LayerSpec::Relu => {
                ops::relu_inplace(&mut x);
                Ok(x)
            }
            LayerSpec::MaxPool2d { window, stride } => Ok(ops::maxpool2d_forward(&x, *window, *stride)?.0),
            LayerSpec::Flatten => {
                let b = x.batch_size();
                let n = x.len() / b;
                x.reshape(vec![b, n])
            }
            LayerSpec::Dense { .. } => {
                let p = self.params[i].as_ref().expect("dense params");
                ops::dense_forward(&x, &p.weight, &p.bias)
            }
            LayerSpec::Softmax => ops::softmax(&x),
        }
    }

    pub(crate) fn logits_range_from(&self, start: usize) -> Range<usize> {
        start..self.logits_end()
    }
}

/// Sets the listed channels of a `B x C x ...` tensor to `+0.0`.
pub(crate) fn zero_channels(x: &mut Tensor, channels: &[usize]) {
    if channels.is_empty() {
        return;
    }
    let b = x.batch_size();
    let c = x.shape()[1];
    let plane = x.len() / (b * c);
    let data = x.data_mut();
    for bi in 0..b {
        for &ch in channels {
            data[(bi * c + ch) * plane..][..plane].fill(0.0);
        }
    }
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy with per-class integer counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub overall_accuracy: f64,
    pub per_class_correct: Vec<u64>,
    pub per_class_total: Vec<u64>,
}

impl EvalResult {
    fn from_counts(per_class_correct: Vec<u64>, per_class_total: Vec<u64>) -> Self {
        let correct: u64 = per_class_correct.iter().sum();
        let total: u64 = per_class_total.iter().sum();
        Self {
            overall_accuracy: correct as f64 / total as f64,
            per_class_correct,
            per_class_total,
        }
    }

    pub fn correct(&self) -> u64 {
        self.per_class_correct.iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.per_class_total.iter().sum()
    }

    /// Accuracy restricted to class `c`, or `None` when the class has no samples.
    pub fn class_accuracy(&self, c: usize) -> Option<f64> {
        match self.per_class_total[c] {
            0 => None,
            n => Some(self.per_class_correct[c] as f64 / n as f64),
        }
    }
}

fn check_dataset(net: &Network, data: &LabeledDataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some((index, &label)) = data.labels().iter().enumerate().find(|(_, &l)| l >= net.class_count()) {
        return Err(Error::LabelOutOfRange {
            index,
            label,
            class_count: net.class_count(),
        });
    }
    Ok(())
}

fn chunk_ranges(n: usize) -> Vec<Range<usize>> {
    (0..n).step_by(EVAL_CHUNK).map(|s| s..(s + EVAL_CHUNK).min(n)).collect()
}

/// Evaluates a per-chunk function in parallel and returns results in chunk order.
pub(crate) fn map_chunks<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Range<usize>) -> Result<T> + Sync,
{
    chunk_ranges(n).into_par_iter().map(&f).collect()
}

/// Top-1 predictions for every sample, in dataset order.
pub fn predict(net: &Network, data: &LabeledDataset, mask: &FilterMask) -> Result<Vec<usize>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    mask.validate(net)?;
    let chunks = map_chunks(data.len(), |r| {
        let logits = net.forward(&data.images().slice_batch(r.start, r.end), mask)?;
        Ok(logits
            .data()
            .chunks_exact(net.class_count())
            .map(argmax)
            .collect::<Vec<_>>())
    })?;
    Ok(chunks.concat())
}

/// Per-class correct counts from a batch of logits.
pub(crate) fn tally(logits: &Tensor, labels: &[usize], correct: &mut [u64]) {
    let k = logits.shape()[1];
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        if argmax(row) == label {
            correct[label] += 1;
        }
    }
}

/// Top-1 accuracy of the masked network on `data`.
///
/// Chunks run on the current rayon pool; counts are integers, so the result
/// does not depend on the number of worker threads.
pub fn evaluate(net: &Network, data: &LabeledDataset, mask: &FilterMask) -> Result<EvalResult> {
    check_dataset(net, data)?;
    mask.validate(net)?;
    let k = net.class_count();
    let parts = map_chunks(data.len(), |r| {
        let logits = net.forward(&data.images().slice_batch(r.start, r.end), mask)?;
        let mut correct = vec![0u64; k];
        tally(&logits, &data.labels()[r], &mut correct);
        Ok(correct)
    })?;
    let mut correct = vec![0u64; k];
    for part in parts {
        for (c, v) in correct.iter_mut().zip(part) {
            *c += v;
        }
    }
    Ok(EvalResult::from_counts(correct, class_totals(data, k)))
}

pub(crate) fn class_totals(data: &LabeledDataset, k: usize) -> Vec<u64> {
    let mut totals = vec![0u64; k];
    for &l in data.labels() {
        totals[l] += 1;
    }
    totals
}

pub(crate) fn validated_dataset(net: &Network, data: &LabeledDataset) -> Result<()> {
    check_dataset(net, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net(seed: u64) -> Network {
        Network::init(
            vec![1, 8, 8],
            vec![
                LayerSpec::conv(2, 1, 3),
                LayerSpec::Relu,
                LayerSpec::maxpool(2),
                LayerSpec::conv(3, 2, 2),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::dense(4, 3 * 2 * 2),
                LayerSpec::Softmax,
            ],
            seed,
        )
        .unwrap()
    }

    fn batch(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, 1, 8, 8], (0..n * 64).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn construction_checks_shape_flow() {
        let err = Network::init(
            vec![1, 8, 8],
            vec![LayerSpec::conv(2, 3, 3), LayerSpec::Flatten, LayerSpec::Softmax],
            0,
        );
        assert!(matches!(err, Err(Error::InvalidNetwork(_))));
        let err = Network::init(vec![1, 4, 4], vec![LayerSpec::Flatten, LayerSpec::dense(3, 16)], 0);
        assert!(matches!(err, Err(Error::InvalidNetwork(_))));
        let net = small_net(0);
        assert_eq!(net.class_count(), 4);
        assert_eq!(net.conv_layers(), vec![0, 3]);
        assert_eq!(net.successor(0), Some(3));
        assert_eq!(net.successor(3), Some(6));
    }

    #[test]
    fn forward_shape_and_empty_mask() {
        let net = small_net(1);
        let x = batch(5, 2);
        let logits = net.forward(&x, &FilterMask::new()).unwrap();
        assert_eq!(logits.shape(), &[5, 4]);
        assert!(logits.all_finite());
    }

    #[test]
    fn mask_matches_zeroed_weights() {
        let net = small_net(3);
        let x = batch(6, 4);
        for r in [FilterRef::new(0, 1), FilterRef::new(3, 0), FilterRef::new(3, 2)] {
            let mut zeroed = net.clone();
            let p = zeroed.layer_params_mut(r.layer).unwrap();
            let slab = p.weight.len() / p.bias.len();
            p.weight.data_mut()[r.filter * slab..(r.filter + 1) * slab].fill(0.0);
            p.bias.data_mut()[r.filter] = 0.0;
            let masked = net.forward(&x, &FilterMask::from_iter([r])).unwrap();
            let oracle = zeroed.forward(&x, &FilterMask::new()).unwrap();
            assert!(masked.bitwise_eq(&oracle), "{r}");
            // Masking an already-dead filter changes nothing.
            let again = zeroed.forward(&x, &FilterMask::from_iter([r])).unwrap();
            assert!(again.bitwise_eq(&oracle));
        }
    }

    #[test]
    fn invalid_filter_is_named() {
        let net = small_net(0);
        let x = batch(1, 0);
        let err = net
            .forward(&x, &FilterMask::from_iter([FilterRef::new(0, 5)]))
            .unwrap_err();
        assert!(matches!(
            err,
            Error::InvalidFilter {
                layer: 0,
                filter: 5,
                ..
            }
        ));
        let err = net
            .forward(&x, &FilterMask::from_iter([FilterRef::new(1, 0)]))
            .unwrap_err();
        assert!(matches!(err, Error::InvalidFilter { layer: 1, .. }));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn mask_helpers() {
        let m: FilterMask = [FilterRef::new(3, 2), FilterRef::new(0, 1), FilterRef::new(3, 0)]
            .into_iter()
            .collect();
        assert_eq!(m.filters_in(3), vec![0, 2]);
        assert_eq!(m.filters_in(1), Vec::<usize>::new());
        let mut twice = m.clone();
        twice.insert(FilterRef::new(0, 1));
        assert_eq!(twice, m);
    }
}
