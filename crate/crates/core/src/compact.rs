//! Structural compaction of masked filters and compression accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{FilterMask, LayerParams, LayerSpec, Network};
use crate::tensor::Tensor;

/// Surviving filters per conv layer; errors if a layer would be emptied.
fn kept_filters(net: &Network, mask: &FilterMask) -> Result<Vec<Option<Vec<usize>>>> {
    mask.validate(net)?;
    net.layers()
        .iter()
        .enumerate()
        .map(|(i, spec)| match spec {
            LayerSpec::Conv2d { out_channels, .. } => {
                let masked = mask.filters_in(i);
                let kept: Vec<usize> = (0..*out_channels).filter(|f| !masked.contains(f)).collect();
                if kept.is_empty() {
                    Err(Error::EmptiedLayer(i))
                } else {
                    Ok(Some(kept))
                }
            }
            _ => Ok(None),
        })
        .collect()
}

/// Indices of the activation's leading dimension that survive, layer by layer.
/// Entry `i` is the selection on the input of layer `i` (`None` = all).
fn input_selections(net: &Network, kept: &[Option<Vec<usize>>]) -> Vec<Option<Vec<usize>>> {
    let shapes = net.activation_shapes();
    let mut sel: Option<Vec<usize>> = None;
    let mut out = Vec::with_capacity(net.layers().len());
    for (i, spec) in net.layers().iter().enumerate() {
        out.push(sel.clone());
        sel = match spec {
            LayerSpec::Conv2d { out_channels, .. } => {
                let k = kept[i].clone().expect("conv layer");
                (k.len() < *out_channels).then_some(k)
            }
            LayerSpec::Flatten => sel.map(|channels| {
                let plane: usize = shapes[i][1..].iter().product();
                channels.iter().flat_map(|&c| c * plane..(c + 1) * plane).collect()
            }),
            LayerSpec::Dense { .. } => None,
            LayerSpec::Relu | LayerSpec::MaxPool2d { .. } | LayerSpec::Softmax => sel,
        };
    }
    out
}

/// Parameter count of `compact(net, mask)` from shape arithmetic alone.
pub fn compacted_parameter_count(net: &Network, mask: &FilterMask) -> Result<usize> {
    let kept = kept_filters(net, mask)?;
    let sel = input_selections(net, &kept);
    let mut total = 0;
    for (i, spec) in net.layers().iter().enumerate() {
        total += match *spec {
            LayerSpec::Conv2d {
                in_channels,
                kernel_h,
                kernel_w,
                ..
            } => {
                let out = kept[i].as_ref().unwrap().len();
                let inp = sel[i].as_ref().map_or(in_channels, Vec::len);
                out * inp * kernel_h * kernel_w + out
            }
            LayerSpec::Dense {
                out_features,
                in_features,
            } => {
                let inp = sel[i].as_ref().map_or(in_features, Vec::len);
                out_features * inp + out_features
            }
            _ => 0,
        };
    }
    Ok(total)
}

/// Removes masked filters, their biases, and the successor weights that read
/// their channels, producing a genuinely smaller network.
///
/// The result's logits match the masked network's up to floating-point
/// summation order (the removed terms were all exact zeros).
pub fn compact(net: &Network, mask: &FilterMask) -> Result<Network> {
    let kept = kept_filters(net, mask)?;
    let sel = input_selections(net, &kept);
    let mut layers = Vec::with_capacity(net.layers().len());
    let mut params = Vec::with_capacity(net.layers().len());
    for (i, spec) in net.layers().iter().enumerate() {
        match *spec {
            LayerSpec::Conv2d {
                out_channels,
                in_channels,
                kernel_h,
                kernel_w,
                stride,
                pad,
            } => {
                let p = net.layer_params(i).expect("conv params");
                let outs = kept[i].clone().unwrap();
                let ins: Vec<usize> = sel[i].clone().unwrap_or_else(|| (0..in_channels).collect());
                let taps = kernel_h * kernel_w;
                let w = p.weight.data();
                let mut data = Vec::with_capacity(outs.len() * ins.len() * taps);
                for &o in &outs {
                    for &c in &ins {
                        let start = (o * in_channels + c) * taps;
                        data.extend_from_slice(&w[start..start + taps]);
                    }
                }
                debug_assert!(outs.len() <= out_channels);
                let bias = outs.iter().map(|&o| p.bias.data()[o]).collect();
                layers.push(LayerSpec::Conv2d {
                    out_channels: outs.len(),
                    in_channels: ins.len(),
                    kernel_h,
                    kernel_w,
                    stride,
                    pad,
                });
                params.push(Some(LayerParams {
                    weight: Tensor::new(vec![outs.len(), ins.len(), kernel_h, kernel_w], data)?,
                    bias: Tensor::new(vec![outs.len()], bias)?,
                }));
            }
            LayerSpec::Dense {
                out_features,
                in_features,
            } => {
                let p = net.layer_params(i).expect("dense params");
                let ins: Vec<usize> = sel[i].clone().unwrap_or_else(|| (0..in_features).collect());
                let w = p.weight.data();
                let mut data = Vec::with_capacity(out_features * ins.len());
                for o in 0..out_features {
                    data.extend(ins.iter().map(|&c| w[o * in_features + c]));
                }
                layers.push(LayerSpec::dense(out_features, ins.len()));
                params.push(Some(LayerParams {
                    weight: Tensor::new(vec![out_features, ins.len()], data)?,
                    bias: p.bias.clone(),
                }));
            }
            ref other => {
                layers.push(other.clone());
                params.push(None);
            }
        }
    }
    Network::new(net.input_shape().to_vec(), layers, params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRatio {
    pub layer: usize,
    pub filters_before: usize,
    pub filters_after: usize,
    /// `filters_before / filters_after`.
    pub filter_ratio: f64,
    pub params_before: usize,
    pub params_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionRatio {
    pub params_before: usize,
    pub params_after: usize,
    /// Whole-network `params_before / params_after`.
    pub parameter_ratio: f64,
    /// One entry per conv layer.
    pub layers: Vec<LayerRatio>,
}

fn layer_param_count(net: &Network, i: usize) -> usize {
    net.layer_params(i).map_or(0, |p| p.weight.len() + p.bias.len())
}

/// Parameter and per-layer filter-count ratios between a network and its compaction.
pub fn compression_ratio(before: &Network, after: &Network) -> Result<CompressionRatio> {
    if before.layers().len() != after.layers().len()
        || before
            .layers()
            .iter()
            .zip(after.layers())
            .any(|(a, b)| a.name() != b.name())
    {
        return Err(Error::InvalidArgument("networks do not share a layer structure".into()));
    }
    let params_after = after.parameter_count();
    if params_after == 0 {
        return Err(Error::ZeroParameters);
    }
    let params_before = before.parameter_count();
    let layers = before
        .conv_layers()
        .into_iter()
        .map(|i| {
            let fb = before.filter_count(i)?;
            let fa = after.filter_count(i)?;
            Ok(LayerRatio {
                layer: i,
                filters_before: fb,
                filters_after: fa,
                filter_ratio: fb as f64 / fa as f64,
                params_before: layer_param_count(before, i),
                params_after: layer_param_count(after, i),
            })
        })
        .collect::<Result<_>>()?;
    Ok(CompressionRatio {
        params_before,
        params_after,
        parameter_ratio: params_before as f64 / params_after as f64,
        layers,
    })
}
