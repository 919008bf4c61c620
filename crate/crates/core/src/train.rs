//! Backpropagation and plain minibatch SGD.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::network::{zero_channels, FilterMask, LayerParams, LayerSpec, Network};
use crate::ops;
use crate::tensor::Tensor;

/// What each layer kept from the forward pass for its backward pass.
enum Saved {
    /// Layer input (conv, dense).
    Input(Tensor),
    /// ReLU output.
    Output(Tensor),
    /// Max-pool input shape and argmax indices.
    Pool(Vec<usize>, Vec<u32>),
    /// Flatten input shape.
    Shape(Vec<usize>),
    None,
}

/// Mean cross-entropy loss of the masked network on a batch, and the gradient
/// of every parameter tensor. Gradients of frozen filters, and of the
/// successor weights that read their channels, are exactly zero.
pub fn gradients(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
    frozen: &FilterMask,
) -> Result<(f32, Vec<Option<LayerParams>>)> {
    frozen.validate(net)?;
    net.check_batch(batch)?;

    let end = net.layers().len() - 1;
    let mut saved = Vec::with_capacity(end);
    let mut x = batch.clone();
    for (i, spec) in net.layers()[..end].iter().enumerate() {
        match spec {
            LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. } => {
                let y = net.apply_layer(i, x.clone())?;
                saved.push(Saved::Input(x));
                x = y;
                if spec.is_conv() {
                    zero_channels(&mut x, &frozen.filters_in(i));
                }
            }
            LayerSpec::Relu => {
                ops::relu_inplace(&mut x);
                saved.push(Saved::Output(x.clone()));
            }
            LayerSpec::MaxPool2d { window, stride } => {
                let (y, arg) = ops::maxpool2d_forward(&x, *window, *stride)?;
                saved.push(Saved::Pool(x.shape().to_vec(), arg));
                x = y;
            }
            LayerSpec::Flatten => {
                saved.push(Saved::Shape(x.shape().to_vec()));
                x = net.apply_layer(i, x)?;
            }
            LayerSpec::Softmax => saved.push(Saved::None),
        }
    }

    let (loss, mut grad) = ops::cross_entropy(&x, labels)?;
    if !loss.is_finite() {
        return Err(Error::Divergence(loss));
    }

    let mut grads: Vec<Option<LayerParams>> = vec![None; net.layers().len()];
    let first_param = net.layers().iter().position(LayerSpec::is_parameterized);
    for i in (0..end).rev() {
        let need_input = first_param.is_some_and(|f| i > f);
        match (&net.layers()[i], saved.pop().expect("one entry per layer")) {
            (LayerSpec::Conv2d { stride, pad, .. }, Saved::Input(input)) => {
                zero_channels(&mut grad, &frozen.filters_in(i));
                let p = net.layer_params(i).expect("conv params");
                let g = ops::conv2d_backward(&input, &p.weight, *stride, *pad, &grad, need_input)?;
                grads[i] = Some(LayerParams {
                    weight: g.weight,
                    bias: g.bias,
                });
                match g.input {
                    Some(d) => grad = d,
                    None => break,
                }
            }
            (LayerSpec::Dense { .. }, Saved::Input(input)) => {
                let p = net.layer_params(i).expect("dense params");
                let g = ops::dense_backward(&input, &p.weight, &grad)?;
                grads[i] = Some(LayerParams {
                    weight: g.weight,
                    bias: g.bias,
                });
                if !need_input {
                    break;
                }
                grad = g.input;
            }
            (LayerSpec::Relu, Saved::Output(y)) => ops::relu_backward(&y, &mut grad),
            (LayerSpec::MaxPool2d { .. }, Saved::Pool(shape, arg)) => {
                grad = ops::maxpool2d_backward(&shape, &arg, &grad)?;
            }
            (LayerSpec::Flatten, Saved::Shape(shape)) => grad = grad.reshape(shape)?,
            (LayerSpec::Softmax, Saved::None) => {}
            _ => unreachable!("saved state matches layer kind"),
        }
    }

    for r in frozen.iter() {
        if let Some(g) = grads[r.layer].as_mut() {
            let slab = g.weight.len() / g.bias.len();
            g.weight.data_mut()[r.filter * slab..(r.filter + 1) * slab].fill(0.0);
            g.bias.data_mut()[r.filter] = 0.0;
        }
        if let Ok((next, idx)) = net.consumer_weights(*r) {
            if let Some(g) = grads[next].as_mut() {
                let w = g.weight.data_mut();
                for j in idx {
                    w[j] = 0.0;
                }
            }
        }
    }
    Ok((loss, grads))
}

/// One SGD step on a batch. Returns the loss measured before the update.
pub fn backward_and_sgd_step(
    net: &mut Network,
    batch: &Tensor,
    labels: &[usize],
    learning_rate: f32,
    frozen: &FilterMask,
) -> Result<f32> {
    if learning_rate.is_nan() || learning_rate < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be non-negative, got {learning_rate}"
        )));
    }
    let (loss, grads) = gradients(net, batch, labels, frozen)?;
    if learning_rate == 0.0 {
        return Ok(loss);
    }
    for (i, g) in grads.into_iter().enumerate() {
        let (Some(g), Some(p)) = (g, net.layer_params_mut(i)) else {
            continue;
        };
        for (w, d) in p.weight.data_mut().iter_mut().zip(g.weight.data()) {
            *w -= learning_rate * d;
        }
        for (b, d) in p.bias.data_mut().iter_mut().zip(g.bias.data()) {
            *b -= learning_rate * d;
        }
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f32,
    pub steps: usize,
}

/// Runs `cfg.epochs` passes of shuffled minibatch SGD over `data`.
///
/// Sample order for each epoch comes from a ChaCha8 stream seeded with `seed`,
/// so identical inputs give bitwise-identical parameters.
pub fn train(
    net: &mut Network,
    data: &LabeledDataset,
    cfg: &SgdConfig,
    frozen: &FilterMask,
    seed: u64,
) -> Result<Vec<EpochLog>> {
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut steps = 0;
        for rows in order.chunks(cfg.batch_size) {
            let batch = data.images().gather_batch(rows);
            let labels: Vec<usize> = rows.iter().map(|&r| data.labels()[r]).collect();
            total += backward_and_sgd_step(net, &batch, &labels, cfg.learning_rate, frozen)? as f64;
            steps += 1;
        }
        log.push(EpochLog {
            epoch: epoch + 1,
            mean_loss: (total / steps as f64) as f32,
            steps,
        });
    }
    Ok(log)
}
