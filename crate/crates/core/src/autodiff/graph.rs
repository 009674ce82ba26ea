//! Tape-style compute graph. Nodes are appended in topological order by
//! construction; `backward` sweeps them once in reverse.

use crate::error::{Error, Result};

use super::store::{Gradients, ParameterStore};
use super::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Convolution padding: `Same` keeps the spatial size (zero padding),
/// `None` is a valid convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pad {
    Same,
    None,
}

/// Batch statistics recorded by a train-mode batchnorm node, to be folded
/// into the running stats by the optimizer step.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv2d {
        pad: Pad,
    },
    BatchNorm {
        // Saved forward context; empty `xhat` means eval mode, where
        // `inv_std` holds 1/sqrt(running_var + eps).
        inv_std: Vec<f64>,
        xhat: Vec<f64>,
        running_mean: Vec<f64>,
    },
    LeakyRelu {
        slope: f64,
    },
    MaxPool2x2 {
        argmax: Vec<usize>,
    },
    Dense,
    Softmax,
    Add,
    Reshape,
    Sum,
    L2Half,
    MseLoss,
    CrossEntropyWithLogits {
        probs: Vec<f64>,
        log_probs: Vec<f64>,
    },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    param: Option<String>,
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    bn_updates: Vec<BnUpdate>,
    grads: Vec<Option<Tensor>>,
    backward_visits: Vec<u32>,
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            bn_updates: Vec::new(),
            grads: Vec::new(),
            backward_visits: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Gradient of the last backward's loss w.r.t. a node, if it was reached.
    pub fn grad_of(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Per-node visit counts from the last backward sweep.
    pub fn backward_visits(&self) -> &[u32] {
        &self.backward_visits
    }

    /// Batch statistics collected by train-mode batchnorm nodes.
    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            param: None,
        });
        self.nodes.len() - 1
    }

    /// Leaf holding a constant (input data, loss target, ...).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    /// Leaf bound to a named parameter; its gradient lands in the result of
    /// `backward` under that name.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<NodeId> {
        let tensor = store
            .param(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name:?}")))?
            .clone();
        let id = self.push(Op::Leaf, vec![], tensor);
        self.nodes[id].param = Some(name.to_string());
        Ok(id)
    }

    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, bias: NodeId, pad: Pad) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.nodes[x].value.shape().to_vec(),
            self.nodes[weight].value.shape().to_vec(),
            self.nodes[bias].value.shape().to_vec(),
        );
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d expects 4D input/weight, got {xs:?} and {ws:?}"
            )));
        }
        let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, wc_in, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
        if k != k2 || k % 2 == 0 {
            return Err(Error::dim(format!("kernel must be square and odd, got {k}x{k2}")));
        }
        if wc_in != c_in {
            return Err(Error::dim(format!(
                "conv2d channel mismatch: input has {c_in}, weight expects {wc_in}"
            )));
        }
        if bs != [c_out] {
            return Err(Error::dim(format!(
                "conv2d bias shape {bs:?} does not match {c_out} output channels"
            )));
        }
        let offset = (k / 2) as isize;
        let (out_h, out_w, base) = match pad {
            Pad::Same => (h, w, -offset),
            Pad::None => {
                if h < k || w < k {
                    return Err(Error::dim("conv2d input smaller than kernel"));
                }
                (h - k + 1, w - k + 1, 0)
            }
        };
        let xv = self.nodes[x].value.data();
        let wv = self.nodes[weight].value.data();
        let bv = self.nodes[bias].value.data();
        let mut out = vec![0.0; n * c_out * out_h * out_w];
        // Row-window accumulation: for each kernel tap, add the shifted input
        // row into the output row over the clipped valid range. Inner loops
        // run over contiguous slices.
        for b in 0..n {
            for co in 0..c_out {
                let o_base = ((b * c_out + co) * out_h) * out_w;
                out[o_base..o_base + out_h * out_w].fill(bv[co]);
                for ci in 0..c_in {
                    let x_base = ((b * c_in + ci) * h) * w;
                    let w_base = ((co * c_in + ci) * k) * k;
                    for i in 0..k {
                        let dh = base + i as isize;
                        let oh_lo = (-dh).max(0) as usize;
                        let oh_hi = (h as isize - dh).clamp(0, out_h as isize) as usize;
                        for j in 0..k {
                            let tap = wv[w_base + i * k + j];
                            if tap == 0.0 {
                                continue;
                            }
                            let dw_ = base + j as isize;
                            let ow_lo = (-dw_).max(0) as usize;
                            let ow_hi = (w as isize - dw_).clamp(0, out_w as isize) as usize;
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            for oh in oh_lo..oh_hi {
                                let ih = (oh as isize + dh) as usize;
                                let iw0 = (ow_lo as isize + dw_) as usize;
                                let x_row = &xv[x_base + ih * w + iw0..][..ow_hi - ow_lo];
                                let o_row =
                                    &mut out[o_base + oh * out_w + ow_lo..][..ow_hi - ow_lo];
                                for (o, &xi) in o_row.iter_mut().zip(x_row) {
                                    *o += tap * xi;
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c_out, out_h, out_w], out)?;
        Ok(self.push(Op::Conv2d { pad }, vec![x, weight, bias], value))
    }

    /// Batch normalization over all axes except the channel axis (axis 1).
    /// Accepts (N,C,H,W) feature maps or (N,F) dense activations. Train mode
    /// normalizes by batch statistics and records them for the running-stat
    /// update; eval mode uses the provided running stats.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
        name: &str,
    ) -> Result<NodeId> {
        let xs = self.nodes[x].value.shape().to_vec();
        if xs.len() != 2 && xs.len() != 4 {
            return Err(Error::dim(format!("batchnorm expects 2D or 4D input, got {xs:?}")));
        }
        let channels = xs[1];
        let spatial: usize = xs[2..].iter().product::<usize>().max(1);
        let batch = xs[0];
        for (label, len) in [
            ("gamma", self.nodes[gamma].value.numel()),
            ("beta", self.nodes[beta].value.numel()),
            ("running_mean", running_mean.len()),
            ("running_var", running_var.len()),
        ] {
            if len != channels {
                return Err(Error::dim(format!(
                    "batchnorm {label} has {len} entries for {channels} channels"
                )));
            }
        }
        let xv = self.nodes[x].value.data();
        let gv = self.nodes[gamma].value.data().to_vec();
        let bv = self.nodes[beta].value.data().to_vec();
        let m = (batch * spatial) as f64;
        let mut out = vec![0.0; xv.len()];
        let index = |b: usize, c: usize, s: usize| (b * channels + c) * spatial + s;

        let op = if self.mode == Mode::Train {
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for c in 0..channels {
                let mut acc = 0.0;
                for b in 0..batch {
                    for s in 0..spatial {
                        acc += xv[index(b, c, s)];
                    }
                }
                mean[c] = acc / m;
                let mut acc2 = 0.0;
                for b in 0..batch {
                    for s in 0..spatial {
                        let d = xv[index(b, c, s)] - mean[c];
                        acc2 += d * d;
                    }
                }
                var[c] = acc2 / m;
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = vec![0.0; xv.len()];
            for c in 0..channels {
                for b in 0..batch {
                    for s in 0..spatial {
                        let i = index(b, c, s);
                        xhat[i] = (xv[i] - mean[c]) * inv_std[c];
                        out[i] = gv[c] * xhat[i] + bv[c];
                    }
                }
            }
            self.bn_updates.push(BnUpdate {
                name: name.to_string(),
                mean,
                var,
            });
            Op::BatchNorm {
                inv_std,
                xhat,
                running_mean: Vec::new(),
            }
        } else {
            let rinv: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            for c in 0..channels {
                for b in 0..batch {
                    for s in 0..spatial {
                        let i = index(b, c, s);
                        out[i] = gv[c] * (xv[i] - running_mean[c]) * rinv[c] + bv[c];
                    }
                }
            }
            Op::BatchNorm {
                inv_std: rinv,
                xhat: Vec::new(),
                running_mean: running_mean.to_vec(),
            }
        };
        let value = Tensor::new(xs, out)?;
        Ok(self.push(op, vec![x, gamma, beta], value))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[x]
            .value
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let value = Tensor {
            shape: self.nodes[x].value.shape().to_vec(),
            data: out,
        };
        self.push(Op::LeakyRelu { slope }, vec![x], value)
    }

    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x].value.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::dim(format!("maxpool expects 4D input, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!("maxpool needs even spatial dims, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.nodes[x].value.data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for b in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx =
                                    ((b * c + ch) * h + (2 * y + dy)) * w + (2 * xo + dx);
                                if xv[idx] > best {
                                    best = xv[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = ((b * c + ch) * oh + y) * ow + xo;
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(Op::MaxPool2x2 { argmax }, vec![x], value))
    }

    /// Affine map y = x W^T + b with x (N, F_in), W (F_out, F_in), b (F_out).
    pub fn dense(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x].value.shape().to_vec();
        let ws = self.nodes[weight].value.shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::dim(format!(
                "dense expects 2D input/weight, got {xs:?} and {ws:?}"
            )));
        }
        let (n, f_in) = (xs[0], xs[1]);
        let (f_out, wf_in) = (ws[0], ws[1]);
        if wf_in != f_in {
            return Err(Error::dim(format!(
                "dense shape mismatch: input features {f_in}, weight expects {wf_in}"
            )));
        }
        if self.nodes[bias].value.numel() != f_out {
            return Err(Error::dim("dense bias length mismatch"));
        }
        let xv = self.nodes[x].value.data();
        let wv = self.nodes[weight].value.data();
        let bv = self.nodes[bias].value.data();
        let mut out = vec![0.0; n * f_out];
        for b in 0..n {
            for o in 0..f_out {
                let mut acc = bv[o];
                for i in 0..f_in {
                    acc += xv[b * f_in + i] * wv[o * f_in + i];
                }
                out[b * f_out + o] = acc;
            }
        }
        let value = Tensor::new(vec![n, f_out], out)?;
        Ok(self.push(Op::Dense, vec![x, weight, bias], value))
    }

    /// Row-wise max-subtracted softmax on a (N, F) tensor.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x].value.shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::dim(format!("softmax expects 2D input, got {xs:?}")));
        }
        let (n, f) = (xs[0], xs[1]);
        if f == 0 {
            return Err(Error::dim("softmax over empty vector"));
        }
        let xv = self.nodes[x].value.data();
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            let row = &xv[b * f..(b + 1) * f];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for i in 0..f {
                let e = (row[i] - max).exp();
                out[b * f + i] = e;
                sum += e;
            }
            for i in 0..f {
                out[b * f + i] /= sum;
            }
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(Op::Softmax, vec![x], value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(Error::dim(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.nodes[a].value.shape(),
                self.nodes[b].value.shape()
            )));
        }
        let out: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor {
            shape: self.nodes[a].value.shape().to_vec(),
            data: out,
        };
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.nodes[x].value.reshaped(shape)?;
        Ok(self.push(Op::Reshape, vec![x], value))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.nodes[x].value.data().iter().sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(total))
    }

    /// Half squared l2 norm, handy for weight-style losses.
    pub fn l2_half(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.nodes[x].value.data().iter().map(|v| v * v).sum();
        self.push(Op::L2Half, vec![x], Tensor::scalar(0.5 * total))
    }

    /// Mean of squared element differences.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        if self.nodes[pred].value.shape() != self.nodes[target].value.shape() {
            return Err(Error::dim(format!(
                "mse shape mismatch: {:?} vs {:?}",
                self.nodes[pred].value.shape(),
                self.nodes[target].value.shape()
            )));
        }
        let n = self.nodes[pred].value.numel() as f64;
        let total: f64 = self.nodes[pred]
            .value
            .data()
            .iter()
            .zip(self.nodes[target].value.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        Ok(self.push(Op::MseLoss, vec![pred, target], Tensor::scalar(total / n)))
    }

    /// Mean over the batch of H(softmax(logits), target); numerically stable
    /// via log-sum-exp. Gradient w.r.t. logits is (softmax - target)/N for
    /// normalized targets.
    pub fn cross_entropy_with_logits(&mut self, logits: NodeId, target: NodeId) -> Result<NodeId> {
        let zs = self.nodes[logits].value.shape().to_vec();
        if zs.len() != 2 || self.nodes[target].value.shape() != zs.as_slice() {
            return Err(Error::dim(format!(
                "cross entropy expects matching 2D shapes, got {:?} vs {:?}",
                zs,
                self.nodes[target].value.shape()
            )));
        }
        let (n, f) = (zs[0], zs[1]);
        let zv = self.nodes[logits].value.data();
        let tv = self.nodes[target].value.data();
        let mut probs = vec![0.0; zv.len()];
        let mut log_probs = vec![0.0; zv.len()];
        let mut total = 0.0;
        for b in 0..n {
            let row = &zv[b * f..(b + 1) * f];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for i in 0..f {
                sum += (row[i] - max).exp();
            }
            let lse = max + sum.ln();
            for i in 0..f {
                log_probs[b * f + i] = row[i] - lse;
                probs[b * f + i] = (row[i] - lse).exp();
                total -= tv[b * f + i] * log_probs[b * f + i];
            }
        }
        let value = Tensor::scalar(total / n as f64);
        Ok(self.push(
            Op::CrossEntropyWithLogits { probs, log_probs },
            vec![logits, target],
            value,
        ))
    }

    /// Reverse-mode sweep from a scalar loss node. Returns the gradients of
    /// every named parameter reachable from the loss; gradients of other nodes
    /// stay queryable through `grad_of`.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let count = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..count).map(|_| None).collect();
        let mut visits = vec![0u32; count];
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..count).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            visits[id] += 1;
            self.propagate(id, &gout, &mut grads)?;
            grads[id] = Some(gout);
        }

        let mut out = Gradients::default();
        for (id, node) in self.nodes.iter().enumerate() {
            if let (Some(name), Some(grad)) = (&node.param, &grads[id]) {
                out.accumulate(name, grad)?;
            }
        }
        self.grads = grads;
        self.backward_visits = visits;
        Ok(out)
    }

    fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        match &mut grads[id] {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(delta.data) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, id: NodeId, gout: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { pad } => {
                let (x, weight, bias) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let xs = self.nodes[x].value.shape();
                let ws = self.nodes[weight].value.shape();
                let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (c_out, _, k, _) = (ws[0], ws[1], ws[2], ws[3]);
                let (out_h, out_w) = (node.value.shape()[2], node.value.shape()[3]);
                let base = match pad {
                    Pad::Same => -((k / 2) as isize),
                    Pad::None => 0,
                };
                let xv = self.nodes[x].value.data();
                let wv = self.nodes[weight].value.data();
                let gv = gout.data();
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; c_out];
                // Mirror of the forward row-window sweep: each tap pairs a
                // contiguous output-gradient row with a contiguous input row.
                for b in 0..n {
                    for co in 0..c_out {
                        let o_base = ((b * c_out + co) * out_h) * out_w;
                        db[co] += gv[o_base..o_base + out_h * out_w].iter().sum::<f64>();
                        for ci in 0..c_in {
                            let x_base = ((b * c_in + ci) * h) * w;
                            let w_base = ((co * c_in + ci) * k) * k;
                            for i in 0..k {
                                let dh = base + i as isize;
                                let oh_lo = (-dh).max(0) as usize;
                                let oh_hi = (h as isize - dh).clamp(0, out_h as isize) as usize;
                                for j in 0..k {
                                    let dw_off = base + j as isize;
                                    let ow_lo = (-dw_off).max(0) as usize;
                                    let ow_hi =
                                        (w as isize - dw_off).clamp(0, out_w as isize) as usize;
                                    if ow_lo >= ow_hi {
                                        continue;
                                    }
                                    let tap = wv[w_base + i * k + j];
                                    let mut tap_grad = 0.0;
                                    for oh in oh_lo..oh_hi {
                                        let ih = (oh as isize + dh) as usize;
                                        let iw0 = (ow_lo as isize + dw_off) as usize;
                                        let g_row =
                                            &gv[o_base + oh * out_w + ow_lo..][..ow_hi - ow_lo];
                                        let x_row = &xv[x_base + ih * w + iw0..][..ow_hi - ow_lo];
                                        let dx_row =
                                            &mut dx[x_base + ih * w + iw0..][..ow_hi - ow_lo];
                                        for ((&g, &xi), dxi) in
                                            g_row.iter().zip(x_row).zip(dx_row.iter_mut())
                                        {
                                            tap_grad += g * xi;
                                            *dxi += g * tap;
                                        }
                                    }
                                    dw[w_base + i * k + j] += tap_grad;
                                }
                            }
                        }
                    }
                }
                Self::accumulate(grads, x, Tensor::new(xs.to_vec(), dx)?);
                Self::accumulate(grads, weight, Tensor::new(ws.to_vec(), dw)?);
                Self::accumulate(grads, bias, Tensor::new(vec![c_out], db)?);
            }
            Op::BatchNorm {
                inv_std,
                xhat,
                running_mean,
            } => {
                let (x, gamma, beta) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let xs = self.nodes[x].value.shape().to_vec();
                let channels = xs[1];
                let spatial: usize = xs[2..].iter().product::<usize>().max(1);
                let batch = xs[0];
                let m = (batch * spatial) as f64;
                let gv = self.nodes[gamma].value.data();
                let g = gout.data();
                let index = |b: usize, c: usize, s: usize| (b * channels + c) * spatial + s;
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; channels];
                let mut dbeta = vec![0.0; channels];
                if xhat.is_empty() {
                    // Eval mode: a per-channel affine map of the input.
                    let xv = self.nodes[x].value.data();
                    for c in 0..channels {
                        for b in 0..batch {
                            for s in 0..spatial {
                                let i = index(b, c, s);
                                dx[i] = g[i] * gv[c] * inv_std[c];
                                dgamma[c] += g[i] * (xv[i] - running_mean[c]) * inv_std[c];
                                dbeta[c] += g[i];
                            }
                        }
                    }
                } else {
                    for c in 0..channels {
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for b in 0..batch {
                            for s in 0..spatial {
                                let i = index(b, c, s);
                                sum_dy += g[i];
                                sum_dy_xhat += g[i] * xhat[i];
                            }
                        }
                        dgamma[c] = sum_dy_xhat;
                        dbeta[c] = sum_dy;
                        let scale = gv[c] * inv_std[c] / m;
                        for b in 0..batch {
                            for s in 0..spatial {
                                let i = index(b, c, s);
                                dx[i] = scale * (m * g[i] - sum_dy - xhat[i] * sum_dy_xhat);
                            }
                        }
                    }
                }
                Self::accumulate(grads, x, Tensor::new(xs, dx)?);
                Self::accumulate(grads, gamma, Tensor::new(vec![channels], dgamma)?);
                Self::accumulate(grads, beta, Tensor::new(vec![channels], dbeta)?);
            }
            Op::LeakyRelu { slope } => {
                let x = node.inputs[0];
                let xv = self.nodes[x].value.data();
                let dx: Vec<f64> = gout
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| if v >= 0.0 { *g } else { slope * g })
                    .collect();
                Self::accumulate(
                    grads,
                    x,
                    Tensor::new(self.nodes[x].value.shape().to_vec(), dx)?,
                );
            }
            Op::MaxPool2x2 { argmax } => {
                let x = node.inputs[0];
                let mut dx = vec![0.0; self.nodes[x].value.numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += gout.data()[o];
                }
                Self::accumulate(
                    grads,
                    x,
                    Tensor::new(self.nodes[x].value.shape().to_vec(), dx)?,
                );
            }
            Op::Dense => {
                let (x, weight, bias) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let xs = self.nodes[x].value.shape();
                let ws = self.nodes[weight].value.shape();
                let (n, f_in) = (xs[0], xs[1]);
                let f_out = ws[0];
                let xv = self.nodes[x].value.data();
                let wv = self.nodes[weight].value.data();
                let g = gout.data();
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; f_out];
                for b in 0..n {
                    for o in 0..f_out {
                        let go = g[b * f_out + o];
                        if go == 0.0 {
                            continue;
                        }
                        db[o] += go;
                        for i in 0..f_in {
                            dw[o * f_in + i] += go * xv[b * f_in + i];
                            dx[b * f_in + i] += go * wv[o * f_in + i];
                        }
                    }
                }
                Self::accumulate(grads, x, Tensor::new(xs.to_vec(), dx)?);
                Self::accumulate(grads, weight, Tensor::new(ws.to_vec(), dw)?);
                Self::accumulate(grads, bias, Tensor::new(vec![f_out], db)?);
            }
            Op::Softmax => {
                let x = node.inputs[0];
                let ys = node.value.shape();
                let (n, f) = (ys[0], ys[1]);
                let yv = node.value.data();
                let g = gout.data();
                let mut dx = vec![0.0; yv.len()];
                for b in 0..n {
                    let mut dot = 0.0;
                    for i in 0..f {
                        dot += g[b * f + i] * yv[b * f + i];
                    }
                    for i in 0..f {
                        dx[b * f + i] = yv[b * f + i] * (g[b * f + i] - dot);
                    }
                }
                Self::accumulate(grads, x, Tensor::new(ys.to_vec(), dx)?);
            }
            Op::Add => {
                Self::accumulate(grads, node.inputs[0], gout.clone());
                Self::accumulate(grads, node.inputs[1], gout.clone());
            }
            Op::Reshape => {
                let x = node.inputs[0];
                let reshaped = gout.reshaped(self.nodes[x].value.shape().to_vec())?;
                Self::accumulate(grads, x, reshaped);
            }
            Op::Sum => {
                let x = node.inputs[0];
                let g = gout.data()[0];
                let dx = vec![g; self.nodes[x].value.numel()];
                Self::accumulate(
                    grads,
                    x,
                    Tensor::new(self.nodes[x].value.shape().to_vec(), dx)?,
                );
            }
            Op::L2Half => {
                let x = node.inputs[0];
                let g = gout.data()[0];
                let dx: Vec<f64> = self.nodes[x].value.data().iter().map(|v| g * v).collect();
                Self::accumulate(
                    grads,
                    x,
                    Tensor::new(self.nodes[x].value.shape().to_vec(), dx)?,
                );
            }
            Op::MseLoss => {
                let (pred, target) = (node.inputs[0], node.inputs[1]);
                let g = gout.data()[0];
                let n = self.nodes[pred].value.numel() as f64;
                let scale = 2.0 * g / n;
                let diffs: Vec<f64> = self.nodes[pred]
                    .value
                    .data()
                    .iter()
                    .zip(self.nodes[target].value.data())
                    .map(|(p, t)| p - t)
                    .collect();
                let dp: Vec<f64> = diffs.iter().map(|d| scale * d).collect();
                let dt: Vec<f64> = diffs.iter().map(|d| -scale * d).collect();
                Self::accumulate(
                    grads,
                    pred,
                    Tensor::new(self.nodes[pred].value.shape().to_vec(), dp)?,
                );
                Self::accumulate(
                    grads,
                    target,
                    Tensor::new(self.nodes[target].value.shape().to_vec(), dt)?,
                );
            }
            Op::CrossEntropyWithLogits { probs, log_probs } => {
                let (logits, target) = (node.inputs[0], node.inputs[1]);
                let zs = self.nodes[logits].value.shape();
                let (n, f) = (zs[0], zs[1]);
                let g = gout.data()[0];
                let tv = self.nodes[target].value.data();
                let mut dz = vec![0.0; probs.len()];
                let mut dt = vec![0.0; probs.len()];
                for b in 0..n {
                    let t_sum: f64 = tv[b * f..(b + 1) * f].iter().sum();
                    for i in 0..f {
                        let idx = b * f + i;
                        dz[idx] = g * (probs[idx] * t_sum - tv[idx]) / n as f64;
                        dt[idx] = -g * log_probs[idx] / n as f64;
                    }
                }
                Self::accumulate(grads, logits, Tensor::new(zs.to_vec(), dz)?);
                Self::accumulate(grads, target, Tensor::new(zs.to_vec(), dt)?);
            }
        }
        Ok(())
    }
}

