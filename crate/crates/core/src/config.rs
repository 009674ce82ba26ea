//! Single JSON configuration document. Every tunable constant lives here with
//! its default; unknown keys are rejected so sweep typos fail loudly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamConfig;
use crate::error::{Error, Result};
use crate::mcts::MctsConfig;
use crate::reconnet::ReconNetConfig;
use crate::samplenet::SampleNetConfig;
use crate::tv::TvConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub vds: VdsSection,
    pub network: NetworkSection,
    pub optimizer: OptimizerSection,
    pub mcts: MctsSection,
    pub training: TrainingSection,
    pub tv: TvSection,
    pub evaluation: EvaluationSection,
    pub dataset: DatasetSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            vds: VdsSection::default(),
            network: NetworkSection::default(),
            optimizer: OptimizerSection::default(),
            mcts: MctsSection::default(),
            training: TrainingSection::default(),
            tv: TvSection::default(),
            evaluation: EvaluationSection::default(),
            dataset: DatasetSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct VdsSection {
    pub density_exponent: f64,
}

impl Default for VdsSection {
    fn default() -> Self {
        VdsSection {
            density_exponent: 2.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub leaky_relu_slope: f64,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    pub reconnet: ReconNetSection,
    pub samplenet: SampleNetSection,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            leaky_relu_slope: 0.01,
            bn_epsilon: 1e-5,
            bn_momentum: 0.9,
            reconnet: ReconNetSection::default(),
            samplenet: SampleNetSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ReconNetSection {
    pub width: usize,
    pub blocks: usize,
}

impl Default for ReconNetSection {
    fn default() -> Self {
        ReconNetSection {
            width: 64,
            blocks: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SampleNetSection {
    pub base_channels: usize,
    pub channel_cap: usize,
    pub dense_units: usize,
}

impl Default for SampleNetSection {
    fn default() -> Self {
        SampleNetSection {
            base_channels: 64,
            channel_cap: 256,
            dense_units: 1024,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MctsSection {
    pub alpha: f64,
    pub c_puct: f64,
    pub epsilon: f64,
    pub dirichlet_concentration: f64,
    pub simulations: usize,
    pub reward_psnr_scale: f64,
}

impl Default for MctsSection {
    fn default() -> Self {
        MctsSection {
            alpha: 0.5,
            c_puct: 1.0,
            epsilon: 0.25,
            dirichlet_concentration: 0.3,
            simulations: 10,
            reward_psnr_scale: 40.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum InitialPattern {
    /// Start every episode with the DC line already sampled.
    Dc,
    /// Start from an empty mask.
    Empty,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub rounds: u32,
    pub batch_size: usize,
    pub images_per_round: usize,
    pub replay_rounds: usize,
    pub max_iterations_per_round: usize,
    pub max_epochs_per_round: usize,
    /// Episode-generation worker threads; 0 means one per core.
    pub workers: usize,
    pub checkpoint_every: u32,
    pub initial_pattern: InitialPattern,
    /// Budget T = side / budget_divisor unless overridden.
    pub budget_divisor: usize,
    pub budget_override: Option<usize>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            rounds: 50,
            batch_size: 16,
            images_per_round: 8,
            replay_rounds: 10,
            max_iterations_per_round: 1000,
            max_epochs_per_round: 3,
            workers: 0,
            checkpoint_every: 10,
            initial_pattern: InitialPattern::Dc,
            budget_divisor: 4,
            budget_override: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TvSection {
    pub lambda: f64,
    pub max_iters: usize,
    pub step: f64,
    pub tolerance: f64,
    pub prox_iters: usize,
}

impl Default for TvSection {
    fn default() -> Self {
        let d = TvConfig::default();
        TvSection {
            lambda: d.lambda,
            max_iters: d.max_iters,
            step: d.step,
            tolerance: d.tolerance,
            prox_iters: d.prox_iters,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    /// Baselines as "<pattern>+<recon>" with pattern in {vds, lpf, uniform}
    /// and recon in {zf, tv}.
    pub baselines: Vec<String>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            baselines: vec![
                "vds+zf".into(),
                "vds+tv".into(),
                "lpf+zf".into(),
                "uniform+zf".into(),
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            train_fraction: 0.8,
            val_fraction: 0.0,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.optimizer.learning_rate,
            beta1: self.optimizer.beta1,
            beta2: self.optimizer.beta2,
            epsilon: self.optimizer.epsilon,
            weight_decay: self.optimizer.weight_decay,
        }
    }

    pub fn reconnet_cfg(&self, channels: usize) -> ReconNetConfig {
        ReconNetConfig {
            channels,
            width: self.network.reconnet.width,
            blocks: self.network.reconnet.blocks,
            leaky_slope: self.network.leaky_relu_slope,
            bn_epsilon: self.network.bn_epsilon,
        }
    }

    pub fn samplenet_cfg(&self, channels: usize, side: usize) -> SampleNetConfig {
        SampleNetConfig {
            channels,
            side,
            base_channels: self.network.samplenet.base_channels,
            channel_cap: self.network.samplenet.channel_cap,
            dense_units: self.network.samplenet.dense_units,
            leaky_slope: self.network.leaky_relu_slope,
            bn_epsilon: self.network.bn_epsilon,
        }
    }

    pub fn mcts_cfg(&self, budget: usize) -> MctsConfig {
        MctsConfig {
            alpha: self.mcts.alpha,
            c_puct: self.mcts.c_puct,
            epsilon: self.mcts.epsilon,
            dirichlet_concentration: self.mcts.dirichlet_concentration,
            simulations: self.mcts.simulations,
            budget,
            seed: self.seed,
            reward_psnr_scale: self.mcts.reward_psnr_scale,
        }
    }

    pub fn tv_cfg(&self) -> TvConfig {
        TvConfig {
            lambda: self.tv.lambda,
            max_iters: self.tv.max_iters,
            step: self.tv.step,
            tolerance: self.tv.tolerance,
            prox_iters: self.tv.prox_iters,
        }
    }

    /// True when `other` can continue training started under `self`:
    /// everything that shapes the numbers must match; the run-control fields
    /// (total rounds, worker count, checkpoint cadence) may differ.
    pub fn resume_compatible(&self, other: &Config) -> bool {
        let normalize = |c: &Config| {
            let mut c = c.clone();
            c.training.rounds = 0;
            c.training.workers = 0;
            c.training.checkpoint_every = 1;
            c
        };
        normalize(self) == normalize(other)
    }

    /// Line budget for a given grid side.
    pub fn budget(&self, side: usize) -> usize {
        self.training
            .budget_override
            .unwrap_or_else(|| (side / self.training.budget_divisor).max(1))
    }
}
