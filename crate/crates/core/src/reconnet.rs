//! Reconstruction network: maps a zero-fill backprojection to a de-aliased
//! image. A 1x1 linear input convolution, a stack of residual blocks
//! (conv3x3 - batchnorm - leaky-ReLU, then the identity skip), and a 1x1
//! linear output convolution back to the image channel count.

use rand::Rng;

use crate::autodiff::{AdamConfig, Graph, Mode, NodeId, Pad, ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::signal::Image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconNetConfig {
    /// Image channel count (1 real, 2 complex); input and output widths.
    pub channels: usize,
    /// Hidden width of every residual block.
    pub width: usize,
    /// Number of residual blocks.
    pub blocks: usize,
    pub leaky_slope: f64,
    pub bn_epsilon: f64,
}

impl Default for ReconNetConfig {
    fn default() -> Self {
        ReconNetConfig {
            channels: 1,
            width: 64,
            blocks: 8,
            leaky_slope: 0.01,
            bn_epsilon: 1e-5,
        }
    }
}

/// He-style fan-in initialization; biases and batchnorm offsets start at zero,
/// batchnorm scales at one.
pub fn init_params(cfg: &ReconNetConfig, rng: &mut impl Rng) -> ParameterStore {
    let mut store = ParameterStore::new();
    let (c, w) = (cfg.channels, cfg.width);
    let std_in = (2.0 / c as f64).sqrt();
    store.insert_param("in.weight", Tensor::randn(vec![w, c, 1, 1], std_in, rng));
    store.insert_param("in.bias", Tensor::zeros(vec![w]));
    let std_block = (2.0 / (w * 9) as f64).sqrt();
    for i in 0..cfg.blocks {
        store.insert_param(
            format!("block{i}.conv.weight"),
            Tensor::randn(vec![w, w, 3, 3], std_block, rng),
        );
        store.insert_param(format!("block{i}.conv.bias"), Tensor::zeros(vec![w]));
        store.insert_param(format!("block{i}.bn.gamma"), Tensor::ones(vec![w]));
        store.insert_param(format!("block{i}.bn.beta"), Tensor::zeros(vec![w]));
        store.insert_buffer(format!("block{i}.bn.running_mean"), Tensor::zeros(vec![w]));
        store.insert_buffer(format!("block{i}.bn.running_var"), Tensor::ones(vec![w]));
    }
    let std_out = (2.0 / w as f64).sqrt();
    store.insert_param("out.weight", Tensor::randn(vec![c, w, 1, 1], std_out, rng));
    store.insert_param("out.bias", Tensor::zeros(vec![c]));
    store
}

/// Closed-form trainable-parameter count for the architecture.
pub fn param_count(cfg: &ReconNetConfig) -> usize {
    let (c, w, b) = (cfg.channels, cfg.width, cfg.blocks);
    (w * c + w) + b * (w * w * 9 + w + w + w) + (c * w + c)
}

fn bn_layer(
    g: &mut Graph,
    x: NodeId,
    store: &ParameterStore,
    prefix: &str,
    eps: f64,
) -> Result<NodeId> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    let mean = store
        .buffer(&format!("{prefix}.running_mean"))
        .ok_or_else(|| Error::contract(format!("missing buffer {prefix}.running_mean")))?;
    let var = store
        .buffer(&format!("{prefix}.running_var"))
        .ok_or_else(|| Error::contract(format!("missing buffer {prefix}.running_var")))?;
    g.batchnorm(x, gamma, beta, mean.data(), var.data(), eps, prefix)
}

/// Build the forward graph from an (N,C,H,W) input node to the output node.
pub fn build_forward(
    g: &mut Graph,
    input: NodeId,
    store: &ParameterStore,
    cfg: &ReconNetConfig,
) -> Result<NodeId> {
    let w_in = g.param(store, "in.weight")?;
    let b_in = g.param(store, "in.bias")?;
    let mut h = g.conv2d(input, w_in, b_in, Pad::Same)?;
    for i in 0..cfg.blocks {
        let w = g.param(store, &format!("block{i}.conv.weight"))?;
        let b = g.param(store, &format!("block{i}.conv.bias"))?;
        let conv = g.conv2d(h, w, b, Pad::Same)?;
        let bn = bn_layer(g, conv, store, &format!("block{i}.bn"), cfg.bn_epsilon)?;
        let act = g.leaky_relu(bn, cfg.leaky_slope);
        h = g.add(h, act)?;
    }
    let w_out = g.param(store, "out.weight")?;
    let b_out = g.param(store, "out.bias")?;
    g.conv2d(h, w_out, b_out, Pad::Same)
}

/// Stack images into an (N,C,H,W) tensor.
pub fn image_batch_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::contract("empty image batch"))?;
    let (side, channels) = (first.side(), first.channels());
    let mut data = Vec::with_capacity(images.len() * channels * side * side);
    for img in images {
        if img.side() != side || img.channels() != channels {
            return Err(Error::dim("images in a batch must share shape"));
        }
        for c in 0..channels {
            for y in 0..side {
                for x in 0..side {
                    data.push(img.at(y, x, c));
                }
            }
        }
    }
    Tensor::new(vec![images.len(), channels, side, side], data)
}

/// Split an (N,C,H,W) tensor back into images.
pub fn tensor_to_images(tensor: &Tensor) -> Result<Vec<Image>> {
    let shape = tensor.shape();
    if shape.len() != 4 {
        return Err(Error::dim(format!("expected 4D tensor, got {shape:?}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = Vec::with_capacity(n);
    for b in 0..n {
        let mut values = vec![0.0; h * w * c];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    values[(y * w + x) * c + ch] = tensor.data()[((b * c + ch) * h + y) * w + x];
                }
            }
        }
        out.push(Image::new(h, w, c, values)?);
    }
    Ok(out)
}

/// Run the network on one zero-fill image.
pub fn forward(
    zf: &Image,
    store: &ParameterStore,
    cfg: &ReconNetConfig,
    mode: Mode,
) -> Result<Image> {
    let mut g = Graph::new(mode);
    let input = g.constant(image_batch_to_tensor(&[zf])?);
    let out = build_forward(&mut g, input, store, cfg)?;
    let mut images = tensor_to_images(g.value(out))?;
    Ok(images.remove(0))
}

/// Training surrogate loss: mean of squared element differences. Minimizing
/// it per image maximizes PSNR, which is a monotone transform of the MSE.
pub fn reconnet_loss(pred: &Image, target: &Image) -> Result<f64> {
    if pred.side() != target.side() || pred.channels() != target.channels() {
        return Err(Error::dim("loss shapes differ"));
    }
    let n = pred.values().len() as f64;
    Ok(pred
        .values()
        .iter()
        .zip(target.values())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// One ADAM step on the mean batch MSE; returns the loss before the update.
pub fn train_step(
    batch: &[(Image, Image)],
    store: &mut ParameterStore,
    cfg: &ReconNetConfig,
    adam: &AdamConfig,
    bn_momentum: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("empty training batch"));
    }
    let inputs: Vec<&Image> = batch.iter().map(|(zf, _)| zf).collect();
    let targets: Vec<&Image> = batch.iter().map(|(_, t)| t).collect();
    let mut g = Graph::new(Mode::Train);
    let input = g.constant(image_batch_to_tensor(&inputs)?);
    let pred = build_forward(&mut g, input, store, cfg)?;
    let target = g.constant(image_batch_to_tensor(&targets)?);
    let loss = g.mse_loss(pred, target)?;
    let loss_value = g.value(loss).item()?;
    let grads = g.backward(loss)?;
    let updates = g.take_bn_updates();
    store.adam_step(&grads, adam)?;
    store.apply_bn_updates(&updates, bn_momentum)?;
    Ok(loss_value)
}
