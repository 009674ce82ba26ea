//! Policy network over readout lines, plus the policy-vector plumbing that
//! keeps already-sampled lines out of play. Convolutional blocks (channel
//! count doubling up to a cap, 2x2 max-pooling after each) shrink the input
//! to 4x4, then a dense layer with batchnorm and leaky-ReLU feeds a final
//! dense layer whose softmax is the policy.

use rand::Rng;

use crate::autodiff::{AdamConfig, Graph, Mode, NodeId, Pad, ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::reconnet::image_batch_to_tensor;
use crate::signal::{Image, LineMask};

/// Probability distribution over candidate readout lines.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyVector {
    side: usize,
    probs: Vec<f64>,
}

impl PolicyVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::contract("policy over zero lines"));
        }
        if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::contract("policy entries must be finite and nonnegative"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "policy must sum to 1 within 1e-9, got {sum}"
            )));
        }
        Ok(PolicyVector {
            side: probs.len(),
            probs,
        })
    }

    pub fn uniform(side: usize) -> Self {
        PolicyVector {
            side,
            probs: vec![1.0 / side as f64; side],
        }
    }

    /// One-hot distribution on a single line.
    pub fn delta(side: usize, line: usize) -> Result<Self> {
        if line >= side {
            return Err(Error::dim(format!("line {line} out of range for side {side}")));
        }
        let mut probs = vec![0.0; side];
        probs[line] = 1.0;
        Ok(PolicyVector { side, probs })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, line: usize) -> f64 {
        self.probs[line]
    }

    /// Most probable line; exact ties break to the lowest index.
    pub fn argmax_line(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Draw one line from the distribution.
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let mut u = rng.random_range(0.0..1.0);
        for (i, &p) in self.probs.iter().enumerate() {
            if u < p {
                return i;
            }
            u -= p;
        }
        // Roundoff spillover: return the last positive entry.
        self.probs
            .iter()
            .rposition(|&p| p > 0.0)
            .unwrap_or(self.side - 1)
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

/// Zero the probabilities of already-sampled lines and renormalize. If the
/// surviving mass is zero the result is uniform over the unsampled lines.
pub fn mask_resampling(pi: &PolicyVector, mask: &LineMask) -> Result<PolicyVector> {
    if pi.side() != mask.side() {
        return Err(Error::dim(format!(
            "policy side {} != mask side {}",
            pi.side(),
            mask.side()
        )));
    }
    let unsampled = mask.unsampled_lines();
    if unsampled.is_empty() {
        return Err(Error::budget("all lines already sampled"));
    }
    let mut probs = pi.probs().to_vec();
    for line in 0..mask.side() {
        if mask.is_sampled(line) {
            probs[line] = 0.0;
        }
    }
    let sum: f64 = probs.iter().sum();
    if sum > 0.0 {
        for p in probs.iter_mut() {
            *p /= sum;
        }
    } else {
        let u = 1.0 / unsampled.len() as f64;
        for &line in &unsampled {
            probs[line] = u;
        }
    }
    Ok(PolicyVector {
        side: mask.side(),
        probs,
    })
}

/// Add argmax(pi) to the mask; `pi` must already exclude sampled lines.
pub fn extend_pattern(mask: &LineMask, pi: &PolicyVector) -> Result<LineMask> {
    if pi.side() != mask.side() {
        return Err(Error::dim("policy and mask sides differ"));
    }
    if mask.budget() == mask.side() {
        return Err(Error::budget("pattern already at full budget"));
    }
    let line = pi.argmax_line();
    if mask.is_sampled(line) {
        return Err(Error::contract(format!(
            "policy places its maximum on already-sampled line {line}"
        )));
    }
    let mut out = mask.clone();
    out.set(line, true);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleNetConfig {
    /// Image channel count of the reconstruction fed in.
    pub channels: usize,
    /// Grid side; also the number of output lines. Must be a power of two
    /// >= 8 so that pooling reaches 4x4.
    pub side: usize,
    /// Channels of the first convolutional block.
    pub base_channels: usize,
    /// Channel doubling stops at this cap.
    pub channel_cap: usize,
    /// Width of the hidden dense layer.
    pub dense_units: usize,
    pub leaky_slope: f64,
    pub bn_epsilon: f64,
}

impl Default for SampleNetConfig {
    fn default() -> Self {
        SampleNetConfig {
            channels: 1,
            side: 32,
            base_channels: 64,
            channel_cap: 256,
            dense_units: 1024,
            leaky_slope: 0.01,
            bn_epsilon: 1e-5,
        }
    }
}

impl SampleNetConfig {
    /// Number of conv/pool blocks needed to shrink `side` to 4.
    pub fn block_count(&self) -> Result<usize> {
        let side = self.side;
        if side < 8 || !side.is_power_of_two() {
            return Err(Error::dim(format!(
                "side must be a power of two >= 8, got {side}"
            )));
        }
        Ok((side / 4).trailing_zeros() as usize)
    }

    fn channel_plan(&self) -> Result<Vec<usize>> {
        let blocks = self.block_count()?;
        Ok((0..blocks)
            .map(|i| (self.base_channels << i).min(self.channel_cap))
            .collect())
    }

    fn flat_features(&self) -> Result<usize> {
        Ok(16 * *self.channel_plan()?.last().expect("at least one block"))
    }
}

pub fn init_params(cfg: &SampleNetConfig, rng: &mut impl Rng) -> Result<ParameterStore> {
    let mut store = ParameterStore::new();
    let plan = cfg.channel_plan()?;
    let mut prev = cfg.channels;
    for (i, &ch) in plan.iter().enumerate() {
        let std = (2.0 / (prev * 9) as f64).sqrt();
        store.insert_param(
            format!("block{i}.conv.weight"),
            Tensor::randn(vec![ch, prev, 3, 3], std, rng),
        );
        store.insert_param(format!("block{i}.conv.bias"), Tensor::zeros(vec![ch]));
        store.insert_param(format!("block{i}.bn.gamma"), Tensor::ones(vec![ch]));
        store.insert_param(format!("block{i}.bn.beta"), Tensor::zeros(vec![ch]));
        store.insert_buffer(format!("block{i}.bn.running_mean"), Tensor::zeros(vec![ch]));
        store.insert_buffer(format!("block{i}.bn.running_var"), Tensor::ones(vec![ch]));
        prev = ch;
    }
    let flat = cfg.flat_features()?;
    let std_fc1 = (2.0 / flat as f64).sqrt();
    store.insert_param(
        "fc1.weight",
        Tensor::randn(vec![cfg.dense_units, flat], std_fc1, rng),
    );
    store.insert_param("fc1.bias", Tensor::zeros(vec![cfg.dense_units]));
    store.insert_param("fc1_bn.gamma", Tensor::ones(vec![cfg.dense_units]));
    store.insert_param("fc1_bn.beta", Tensor::zeros(vec![cfg.dense_units]));
    store.insert_buffer("fc1_bn.running_mean", Tensor::zeros(vec![cfg.dense_units]));
    store.insert_buffer("fc1_bn.running_var", Tensor::ones(vec![cfg.dense_units]));
    let std_fc2 = (2.0 / cfg.dense_units as f64).sqrt();
    store.insert_param(
        "fc2.weight",
        Tensor::randn(vec![cfg.side, cfg.dense_units], std_fc2, rng),
    );
    store.insert_param("fc2.bias", Tensor::zeros(vec![cfg.side]));
    Ok(store)
}

/// Closed-form trainable-parameter count for the architecture.
pub fn param_count(cfg: &SampleNetConfig) -> Result<usize> {
    let plan = cfg.channel_plan()?;
    let mut prev = cfg.channels;
    let mut count = 0;
    for &ch in &plan {
        count += ch * prev * 9 + ch + 2 * ch;
        prev = ch;
    }
    let flat = cfg.flat_features()?;
    count += cfg.dense_units * flat + cfg.dense_units + 2 * cfg.dense_units;
    count += cfg.side * cfg.dense_units + cfg.side;
    Ok(count)
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

/// Build the graph from an (N,C,side,side) input node to the (N,side) logits.
pub fn build_logits(
    g: &mut Graph,
    input: NodeId,
    store: &ParameterStore,
    cfg: &SampleNetConfig,
) -> Result<NodeId> {
    let batch = g.value(input).shape()[0];
    let plan = cfg.channel_plan()?;
    let mut h = input;
    for i in 0..plan.len() {
        let w = g.param(store, &format!("block{i}.conv.weight"))?;
        let b = g.param(store, &format!("block{i}.conv.bias"))?;
        let conv = g.conv2d(h, w, b, Pad::Same)?;
        let bn = bn_layer(g, conv, store, &format!("block{i}.bn"), cfg.bn_epsilon)?;
        let act = g.leaky_relu(bn, cfg.leaky_slope);
        h = g.maxpool2x2(act)?;
    }
    let flat = g.reshape(h, vec![batch, cfg.flat_features()?])?;
    let w1 = g.param(store, "fc1.weight")?;
    let b1 = g.param(store, "fc1.bias")?;
    let d1 = g.dense(flat, w1, b1)?;
    let bn1 = bn_layer(g, d1, store, "fc1_bn", cfg.bn_epsilon)?;
    let a1 = g.leaky_relu(bn1, cfg.leaky_slope);
    let w2 = g.param(store, "fc2.weight")?;
    let b2 = g.param(store, "fc2.bias")?;
    g.dense(a1, w2, b2)
}

/// Policy over the next readout line for one reconstruction.
pub fn forward(
    recon: &Image,
    store: &ParameterStore,
    cfg: &SampleNetConfig,
    mode: Mode,
) -> Result<PolicyVector> {
    if recon.side() != cfg.side {
        return Err(Error::dim(format!(
            "image side {} does not match configured side {}",
            recon.side(),
            cfg.side
        )));
    }
    let mut g = Graph::new(mode);
    let input = g.constant(image_batch_to_tensor(&[recon])?);
    let logits = build_logits(&mut g, input, store, cfg)?;
    let probs = g.softmax(logits)?;
    PolicyVector::new(g.value(probs).data().to_vec())
}

/// One ADAM step on the mean cross entropy against MCTS policy targets;
/// returns the loss before the update.
pub fn train_step(
    batch: &[(Image, PolicyVector)],
    store: &mut ParameterStore,
    cfg: &SampleNetConfig,
    adam: &AdamConfig,
    bn_momentum: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("empty training batch"));
    }
    let mut target = Vec::with_capacity(batch.len() * cfg.side);
    for (_, pi) in batch {
        if pi.side() != cfg.side {
            return Err(Error::dim("target policy side mismatch"));
        }
        let sum: f64 = pi.probs().iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::contract("target policy is not normalized"));
        }
        target.extend_from_slice(pi.probs());
    }
    let inputs: Vec<&Image> = batch.iter().map(|(img, _)| img).collect();
    let mut g = Graph::new(Mode::Train);
    let input = g.constant(image_batch_to_tensor(&inputs)?);
    let logits = build_logits(&mut g, input, store, cfg)?;
    let target = g.constant(Tensor::new(vec![batch.len(), cfg.side], target)?);
    let loss = g.cross_entropy_with_logits(logits, target)?;
    let loss_value = g.value(loss).item()?;
    let grads = g.backward(loss)?;
    let updates = g.take_bn_updates();
    store.adam_step(&grads, adam)?;
    store.apply_bn_updates(&updates, bn_momentum)?;
    Ok(loss_value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{fd_gradient, max_relative_error};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(side: usize) -> SampleNetConfig {
        SampleNetConfig {
            channels: 1,
            side,
            base_channels: 4,
            channel_cap: 8,
            dense_units: 8,
            ..SampleNetConfig::default()
        }
    }

    fn random_image(side: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..side * side).map(|_| rng.random_range(-1.0..1.0)).collect();
        Image::new(side, side, 1, values).unwrap()
    }

    #[test]
    fn block_count_matches_side() {
        assert_eq!(tiny_cfg(8).block_count().unwrap(), 1);
        assert_eq!(tiny_cfg(16).block_count().unwrap(), 2);
        assert_eq!(tiny_cfg(32).block_count().unwrap(), 3);
        assert!(tiny_cfg(6).block_count().is_err());
        assert!(tiny_cfg(4).block_count().is_err());
    }

    #[test]
    fn paper_scale_plan_reaches_4x4x256() {
        let cfg = SampleNetConfig {
            side: 64,
            ..SampleNetConfig::default()
        };
        assert_eq!(cfg.channel_plan().unwrap(), vec![64, 128, 256, 256]);
        assert_eq!(cfg.flat_features().unwrap(), 16 * 256);
    }

    #[test]
    fn forward_returns_valid_policy() {
        let cfg = tiny_cfg(16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let store = init_params(&cfg, &mut rng).unwrap();
        for seed in 0..5 {
            let pi = forward(&random_image(16, seed), &store, &cfg, Mode::Eval).unwrap();
            assert_eq!(pi.side(), 16);
            let sum: f64 = pi.probs().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zeroed_final_layer_gives_uniform_policy() {
        let cfg = tiny_cfg(8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = init_params(&cfg, &mut rng).unwrap();
        store
            .set_param("fc2.weight", Tensor::zeros(vec![8, cfg.dense_units]))
            .unwrap();
        store.set_param("fc2.bias", Tensor::zeros(vec![8])).unwrap();
        let pi = forward(&random_image(8, 2), &store, &cfg, Mode::Eval).unwrap();
        for &p in pi.probs() {
            assert!((p - 1.0 / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn param_count_matches_closed_form() {
        let cfg = tiny_cfg(16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = init_params(&cfg, &mut rng).unwrap();
        assert_eq!(store.param_count(), param_count(&cfg).unwrap());
    }

    #[test]
    fn full_network_gradient_check() {
        let cfg = tiny_cfg(8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = init_params(&cfg, &mut rng).unwrap();
        // Nudge every parameter off its symmetric init so no activation sits
        // exactly on the leaky-ReLU kink, where finite differences straddle
        // the two slopes.
        for name in store.param_names().cloned().collect::<Vec<_>>() {
            let mut t = store.param(&name).unwrap().clone();
            for v in t.data_mut() {
                *v += rng.random_range(0.01..0.1);
            }
            store.set_param(&name, t).unwrap();
        }
        let store = store;
        let img = random_image(8, 5);
        let target = PolicyVector::new(vec![0.3, 0.1, 0.05, 0.05, 0.2, 0.1, 0.1, 0.1]).unwrap();

        let loss_of = |s: &ParameterStore| -> f64 {
            let mut g = Graph::new(Mode::Train);
            let input = g.constant(image_batch_to_tensor(&[&img]).unwrap());
            let logits = build_logits(&mut g, input, s, &cfg).unwrap();
            let t = g.constant(Tensor::new(vec![1, 8], target.probs().to_vec()).unwrap());
            let loss = g.cross_entropy_with_logits(logits, t).unwrap();
            g.value(loss).item().unwrap()
        };

        let mut g = Graph::new(Mode::Train);
        let input = g.constant(image_batch_to_tensor(&[&img]).unwrap());
        let logits = build_logits(&mut g, input, &store, &cfg).unwrap();
        let t = g.constant(Tensor::new(vec![1, 8], target.probs().to_vec()).unwrap());
        let loss = g.cross_entropy_with_logits(logits, t).unwrap();
        let grads = g.backward(loss).unwrap();

        for name in store.param_names() {
            let param = store.param(name).unwrap().clone();
            let fd = fd_gradient(param.data(), 1e-5, |pert| {
                let mut probe = store.clone();
                probe
                    .set_param(name, Tensor::new(param.shape().to_vec(), pert.to_vec()).unwrap())
                    .unwrap();
                loss_of(&probe)
            });
            let err = max_relative_error(grads.get(name).unwrap().data(), &fd, 1e-3);
            assert!(err <= 1e-5, "{name}: max relative error {err}");
        }
    }

    #[test]
    fn mask_resampling_cases() {
        let pi = PolicyVector::uniform(4);
        let empty = LineMask::empty(4);
        assert_eq!(mask_resampling(&pi, &empty).unwrap(), pi);

        let mask = LineMask::from_lines(4, &[2]).unwrap();
        let out = mask_resampling(&pi, &mask).unwrap();
        for (line, &p) in out.probs().iter().enumerate() {
            if line == 2 {
                assert_eq!(p, 0.0);
            } else {
                assert!((p - 1.0 / 3.0).abs() < 1e-12);
            }
        }

        // Mass already clear of the mask stays unchanged.
        let concentrated = PolicyVector::new(vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert_eq!(
            mask_resampling(&concentrated, &mask).unwrap(),
            concentrated
        );

        let full = LineMask::full(4);
        assert!(matches!(
            mask_resampling(&pi, &full),
            Err(crate::error::Error::Budget(_))
        ));
    }

    #[test]
    fn resampled_policy_supported_on_unsampled_lines() {
        let cfg = tiny_cfg(8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let store = init_params(&cfg, &mut rng).unwrap();
        let mask = LineMask::from_lines(8, &[0, 3, 7]).unwrap();
        for seed in 0..5 {
            let pi = forward(&random_image(8, seed), &store, &cfg, Mode::Eval).unwrap();
            let masked = mask_resampling(&pi, &mask).unwrap();
            for line in mask.sampled_lines() {
                assert_eq!(masked.prob(line), 0.0);
            }
            assert!((masked.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn extend_pattern_cases() {
        let mask = LineMask::from_lines(8, &[0]).unwrap();
        let pi = PolicyVector::delta(8, 5).unwrap();
        let grown = extend_pattern(&mask, &pi).unwrap();
        assert!(grown.is_sampled(5));
        assert_eq!(grown.budget(), mask.budget() + 1);

        // Tie between lines 2 and 5: lowest index wins.
        let mut probs = vec![0.0; 8];
        probs[2] = 0.5;
        probs[5] = 0.5;
        let tie = PolicyVector::new(probs).unwrap();
        assert!(extend_pattern(&mask, &tie).unwrap().is_sampled(2));

        assert!(extend_pattern(&LineMask::full(8), &pi).is_err());
    }

    #[test]
    fn repeated_extension_reaches_budget() {
        let mut mask = LineMask::empty(8);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for t in 1..=8 {
            let raw: Vec<f64> = (0..8).map(|_| rng.random_range(0.1..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            let pi = PolicyVector::new(raw.iter().map(|v| v / sum).collect()).unwrap();
            let masked = mask_resampling(&pi, &mask).unwrap();
            mask = extend_pattern(&mask, &masked).unwrap();
            assert_eq!(mask.budget(), t);
        }
    }

    #[test]
    fn train_step_overfits_single_pair() {
        let cfg = tiny_cfg(8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = init_params(&cfg, &mut rng).unwrap();
        let img = random_image(8, 9);
        let target =
            PolicyVector::new(vec![0.4, 0.2, 0.1, 0.1, 0.05, 0.05, 0.05, 0.05]).unwrap();
        let entropy = target.entropy();
        let adam = AdamConfig {
            learning_rate: 3e-2,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let batch = vec![(img, target)];
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            last = train_step(&batch, &mut store, &cfg, &adam, 0.9).unwrap();
        }
        assert!(
            last - entropy < 1e-2,
            "cross entropy {last} not within 1e-2 of target entropy {entropy}"
        );
    }

    #[test]
    fn unnormalized_target_rejected() {
        let cfg = tiny_cfg(8);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = init_params(&cfg, &mut rng).unwrap();
        let img = random_image(8, 11);
        let bad = PolicyVector {
            side: 8,
            probs: vec![0.5; 8],
        };
        assert!(matches!(
            train_step(&[(img, bad)], &mut store, &cfg, &AdamConfig::default(), 0.9),
            Err(crate::error::Error::Contract(_))
        ));
    }
}
