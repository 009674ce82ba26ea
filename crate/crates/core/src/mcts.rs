//! Monte Carlo tree search with implicit minimax backup. Each node blends the
//! mean (Q) and maximum (V) of the rewards backed up through it; selection
//! follows an upper confidence bound built from that blend plus a
//! Dirichlet-noised prior, and leaves are scored by rolling the pattern out to
//! the full budget and reconstructing.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::autodiff::{Mode, ParameterStore};
use crate::error::{Error, Result};
use crate::reconnet::{self, ReconNetConfig};
use crate::samplenet::{self, mask_resampling, PolicyVector, SampleNetConfig};
use crate::signal::{mask_spectrum, psnr, zero_fill_from_spectrum, dft2_forward, Image, LineMask, SpectralGrid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MctsConfig {
    /// Blend between mean (0) and maximum (1) backed-up reward.
    pub alpha: f64,
    /// Exploration constant on the prior term.
    pub c_puct: f64,
    /// Dirichlet mixing fraction wherever the policy is used.
    pub epsilon: f64,
    /// Concentration of the per-expansion Dirichlet noise.
    pub dirichlet_concentration: f64,
    /// Number of search passes per returned policy.
    pub simulations: usize,
    /// Total line budget T that rollouts complete to.
    pub budget: usize,
    /// Base seed for callers that derive their RNG from the config.
    pub seed: u64,
    /// PSNR saturation scale for the [0,1] reward map.
    pub reward_psnr_scale: f64,
}

impl Default for MctsConfig {
    fn default() -> Self {
        MctsConfig {
            alpha: 0.5,
            c_puct: 1.0,
            epsilon: 0.25,
            dirichlet_concentration: 0.3,
            simulations: 10,
            budget: 8,
            seed: 0,
            reward_psnr_scale: 40.0,
        }
    }
}

/// Anything that can propose next lines and score completed patterns. The
/// production guide wraps the two networks; tests substitute synthetic
/// oracles.
pub trait Guide {
    /// Prior over the next line. Must exclude already-sampled lines and be
    /// normalized; `mask_resampling` does both.
    fn prior(&self, pattern: &LineMask) -> Result<PolicyVector>;
    /// Reward for a completed pattern, expected to live in [0, 1].
    fn reward(&self, pattern: &LineMask) -> Result<f64>;
}

/// Map a PSNR in dB onto [0, 1], saturating monotonically:
/// r = p / (p + scale), with 0 for nonpositive and 1 for infinite PSNR.
pub fn saturating_reward(psnr_db: f64, scale: f64) -> f64 {
    if psnr_db <= 0.0 {
        0.0
    } else if psnr_db.is_infinite() {
        1.0
    } else {
        psnr_db / (psnr_db + scale)
    }
}

/// Network-backed guide for one episode. The target image enters only through
/// the acquisition mask and the final reward.
pub struct NetGuide<'a> {
    image: &'a Image,
    spectrum: SpectralGrid,
    recon_store: &'a ParameterStore,
    recon_cfg: &'a ReconNetConfig,
    sample_store: &'a ParameterStore,
    sample_cfg: &'a SampleNetConfig,
    reward_psnr_scale: f64,
}

impl<'a> NetGuide<'a> {
    pub fn new(
        image: &'a Image,
        recon_store: &'a ParameterStore,
        recon_cfg: &'a ReconNetConfig,
        sample_store: &'a ParameterStore,
        sample_cfg: &'a SampleNetConfig,
        reward_psnr_scale: f64,
    ) -> Result<Self> {
        Ok(NetGuide {
            image,
            spectrum: dft2_forward(image)?,
            recon_store,
            recon_cfg,
            sample_store,
            sample_cfg,
            reward_psnr_scale,
        })
    }

    pub fn zero_fill(&self, pattern: &LineMask) -> Result<Image> {
        let masked = mask_spectrum(&self.spectrum, pattern)?;
        zero_fill_from_spectrum(&masked, self.image.channels())
    }

    pub fn reconstruct(&self, pattern: &LineMask) -> Result<Image> {
        let zf = self.zero_fill(pattern)?;
        reconnet::forward(&zf, self.recon_store, self.recon_cfg, Mode::Eval)
    }
}

impl Guide for NetGuide<'_> {
    fn prior(&self, pattern: &LineMask) -> Result<PolicyVector> {
        let recon = self.reconstruct(pattern)?;
        let pi = samplenet::forward(&recon, self.sample_store, self.sample_cfg, Mode::Eval)?;
        mask_resampling(&pi, pattern)
    }

    fn reward(&self, pattern: &LineMask) -> Result<f64> {
        let recon = self.reconstruct(pattern)?;
        Ok(saturating_reward(
            psnr(&recon, self.image)?,
            self.reward_psnr_scale,
        ))
    }
}

/// Per-pattern search statistics. `q` is the mean and `v` the maximum of all
/// rewards backed up through the node; `n` counts those backups.
#[derive(Debug, Clone)]
pub struct SearchNode {
    q: f64,
    v: f64,
    n: u64,
    prior: Option<PolicyVector>,
    children: BTreeMap<usize, SearchNode>,
}

impl Default for SearchNode {
    fn default() -> Self {
        Self::new()
    }
}

impl SearchNode {
    pub fn new() -> Self {
        SearchNode {
            q: 0.0,
            v: f64::NEG_INFINITY,
            n: 0,
            prior: None,
            children: BTreeMap::new(),
        }
    }

    pub fn mean_reward(&self) -> f64 {
        self.q
    }

    pub fn max_reward(&self) -> f64 {
        self.v
    }

    pub fn visits(&self) -> u64 {
        self.n
    }

    pub fn prior(&self) -> Option<&PolicyVector> {
        self.prior.as_ref()
    }

    pub fn children(&self) -> &BTreeMap<usize, SearchNode> {
        &self.children
    }

    /// Fold one reward into the node statistics:
    /// Q <- (Q*N + v)/(N+1), V <- max(V, v), N <- N+1.
    pub fn apply_backup(&mut self, reward: f64) {
        self.q = (self.q * self.n as f64 + reward) / (self.n as f64 + 1.0);
        self.v = if self.n == 0 { reward } else { self.v.max(reward) };
        self.n += 1;
    }
}

/// Back one reward up a path of nodes (root first or leaf first; the update
/// is order-independent).
pub fn backup<'a>(path: impl IntoIterator<Item = &'a mut SearchNode>, reward: f64) {
    for node in path {
        node.apply_backup(reward);
    }
}

/// Upper confidence bound for one child:
/// U = (1-alpha) Q + alpha V + c_puct ((1-eps) prior + eps noise) sqrt(N_parent / N_child).
pub fn ucb_score(
    child: &SearchNode,
    prior_a: f64,
    noise_a: f64,
    parent_visits: u64,
    cfg: &MctsConfig,
) -> f64 {
    let exploit = (1.0 - cfg.alpha) * child.q + cfg.alpha * child.v;
    let mixed = (1.0 - cfg.epsilon) * prior_a + cfg.epsilon * noise_a;
    let explore = cfg.c_puct * mixed * (parent_visits as f64 / child.n as f64).sqrt();
    exploit + explore
}

/// Dirichlet noise over the unsampled lines, embedded in a full-length vector
/// (zeros on sampled lines). Sampled per expansion and per rollout step.
fn dirichlet_noise(pattern: &LineMask, concentration: f64, rng: &mut impl Rng) -> Vec<f64> {
    let unsampled = pattern.unsampled_lines();
    let mut noise = vec![0.0; pattern.side()];
    if unsampled.len() == 1 {
        noise[unsampled[0]] = 1.0;
        return noise;
    }
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    let mut sum = 0.0;
    for &line in &unsampled {
        let draw: f64 = gamma.sample(rng);
        noise[line] = draw;
        sum += draw;
    }
    if sum > 0.0 {
        for v in noise.iter_mut() {
            *v /= sum;
        }
    } else {
        let u = 1.0 / unsampled.len() as f64;
        for &line in &unsampled {
            noise[line] = u;
        }
    }
    noise
}

fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let mut u = rng.random_range(0.0..1.0);
    for (i, &p) in probs.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Complete a pattern to the full budget by sampling each next line from the
/// noised prior, then score the result. A pattern already at budget is scored
/// immediately.
pub fn simulate(
    pattern: &LineMask,
    guide: &impl Guide,
    cfg: &MctsConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    if pattern.budget() > cfg.budget {
        return Err(Error::contract(format!(
            "pattern budget {} exceeds search budget {}",
            pattern.budget(),
            cfg.budget
        )));
    }
    let mut pat = pattern.clone();
    while pat.budget() < cfg.budget {
        let prior = guide.prior(&pat)?;
        let noise = dirichlet_noise(&pat, cfg.dirichlet_concentration, rng);
        let mixed: Vec<f64> = prior
            .probs()
            .iter()
            .zip(&noise)
            .map(|(p, d)| (1.0 - cfg.epsilon) * p + cfg.epsilon * d)
            .collect();
        let line = sample_categorical(&mixed, rng);
        pat.set(line, true);
    }
    guide.reward(&pat)
}

/// Pick the next line from a visited node: unvisited children first (by
/// largest noised prior, lowest index on ties), otherwise the argmax of the
/// upper confidence bound. Dirichlet noise is redrawn on every selection,
/// since the bound uses the policy each time it is evaluated.
fn select_line(
    node: &SearchNode,
    pattern: &LineMask,
    cfg: &MctsConfig,
    rng: &mut impl Rng,
) -> Result<usize> {
    let prior = node
        .prior
        .as_ref()
        .ok_or_else(|| Error::contract("selection reached an unexpanded node"))?;
    let noise = dirichlet_noise(pattern, cfg.dirichlet_concentration, rng);
    let candidates = pattern.unsampled_lines();
    if candidates.is_empty() {
        return Err(Error::budget("no lines left to select"));
    }

    let mut best_unvisited: Option<(usize, f64)> = None;
    for &line in &candidates {
        let visited = node.children.get(&line).map(|c| c.n > 0).unwrap_or(false);
        if !visited {
            let mixed = (1.0 - cfg.epsilon) * prior.prob(line) + cfg.epsilon * noise[line];
            match best_unvisited {
                Some((_, score)) if score >= mixed => {}
                _ => best_unvisited = Some((line, mixed)),
            }
        }
    }
    if let Some((line, _)) = best_unvisited {
        return Ok(line);
    }

    let mut best = candidates[0];
    let mut best_score = f64::NEG_INFINITY;
    for &line in &candidates {
        let child = node.children.get(&line).expect("all candidates visited");
        let score = ucb_score(child, prior.prob(line), noise[line], node.n, cfg);
        if score > best_score {
            best = line;
            best_score = score;
        }
    }
    Ok(best)
}

fn search_recursive(
    node: &mut SearchNode,
    pattern: &mut LineMask,
    guide: &impl Guide,
    cfg: &MctsConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let reward = if node.n == 0 {
        // First visit: expand (below budget) and roll out.
        if pattern.budget() < cfg.budget {
            node.prior = Some(guide.prior(pattern)?);
        }
        simulate(pattern, guide, cfg, rng)?
    } else if pattern.budget() >= cfg.budget {
        // Revisited terminal pattern: re-score it.
        guide.reward(pattern)?
    } else {
        let line = select_line(node, pattern, cfg, rng)?;
        pattern.set(line, true);
        let child = node.children.entry(line).or_default();
        let reward = search_recursive(child, pattern, guide, cfg, rng)?;
        pattern.set(line, false);
        reward
    };
    node.apply_backup(reward);
    Ok(reward)
}

/// One selection -> expansion -> simulation -> backup pass from `root`, whose
/// pattern is `pattern`. Returns the rollout reward.
pub fn search(
    root: &mut SearchNode,
    pattern: &LineMask,
    guide: &impl Guide,
    cfg: &MctsConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut working = pattern.clone();
    search_recursive(root, &mut working, guide, cfg, rng)
}

/// Visit-count distribution over the root's children; lines never visited get
/// probability zero.
pub fn mcts_policy(root: &SearchNode, side: usize) -> Result<PolicyVector> {
    let mut counts = vec![0.0; side];
    let mut total = 0.0;
    for (&line, child) in &root.children {
        if child.n > 0 {
            counts[line] = child.n as f64;
            total += child.n as f64;
        }
    }
    if total == 0.0 {
        return Err(Error::contract("policy requested before any child visit"));
    }
    for c in counts.iter_mut() {
        *c /= total;
    }
    PolicyVector::new(counts)
}

/// A search tree kept alive across an episode: run a batch of searches, read
/// off the policy, commit a line and keep the matching subtree as the new
/// root.
#[derive(Debug, Default)]
pub struct SearchTree {
    root: SearchNode,
}

impl SearchTree {
    pub fn new() -> Self {
        SearchTree {
            root: SearchNode::new(),
        }
    }

    pub fn root(&self) -> &SearchNode {
        &self.root
    }

    /// Run `cfg.simulations` search passes from the current root.
    pub fn run(
        &mut self,
        pattern: &LineMask,
        guide: &impl Guide,
        cfg: &MctsConfig,
        rng: &mut impl Rng,
    ) -> Result<()> {
        for _ in 0..cfg.simulations {
            search(&mut self.root, pattern, guide, cfg, rng)?;
        }
        Ok(())
    }

    pub fn policy(&self, side: usize) -> Result<PolicyVector> {
        mcts_policy(&self.root, side)
    }

    /// Commit a line: the matching child subtree becomes the new root.
    pub fn commit(&mut self, line: usize) {
        let child = self.root.children.remove(&line).unwrap_or_default();
        self.root = child;
    }
}
