//! Self-supervised training loop: episodes of tree-search-guided progressive
//! sampling feed a round-capped replay memory, out of which both networks are
//! trained; plus the test-time progressive evaluation harness.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::ParameterStore;
use crate::checkpoint::Checkpoint;
use crate::config::{Config, InitialPattern};
use crate::error::{Error, Result};
use crate::mcts::{MctsConfig, NetGuide, SearchTree, Guide};
use crate::reconnet::{self, ReconNetConfig};
use crate::samplenet::{self, extend_pattern, PolicyVector, SampleNetConfig};
use crate::sampling::{lpf_pattern, uniform_random_pattern, vds_pattern, VdsParams};
use crate::signal::{dft2_forward, mask_spectrum, psnr, zero_fill_reconstruct, Image, LineMask};
use crate::tv::tv_reconstruct;

/// One step of one episode: everything both networks train on.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperienceRecord {
    /// Sampling pattern the policy was computed at.
    pub pattern: LineMask,
    /// Reconstruction-network input for this pattern.
    pub zero_fill: Image,
    /// Ground truth; read only as the reconstruction loss target.
    pub target_image: Image,
    /// Visit-count policy returned by the tree search.
    pub mcts_policy: PolicyVector,
    /// Reconstruction at this pattern; the policy network's input.
    pub recon_at_t: Image,
    pub round_id: u32,
    pub t: usize,
}

/// Records grouped by round, keeping only the most recent `capacity` rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayMemory {
    capacity: usize,
    rounds: VecDeque<(u32, Vec<ExperienceRecord>)>,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        ReplayMemory {
            capacity: capacity.max(1),
            rounds: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rounds.iter().map(|(_, r)| r.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn round_ids(&self) -> Vec<u32> {
        self.rounds.iter().map(|(id, _)| *id).collect()
    }

    pub fn records(&self) -> impl Iterator<Item = &ExperienceRecord> {
        self.rounds.iter().flat_map(|(_, r)| r.iter())
    }

    pub fn rounds(&self) -> impl Iterator<Item = (u32, &[ExperienceRecord])> {
        self.rounds.iter().map(|(id, r)| (*id, r.as_slice()))
    }

    pub(crate) fn from_rounds(
        capacity: usize,
        rounds: Vec<(u32, Vec<ExperienceRecord>)>,
    ) -> Result<Self> {
        let mut memory = ReplayMemory::new(capacity);
        for (id, records) in rounds {
            memory.push_round(records, id)?;
        }
        Ok(memory)
    }

    /// Append one round of records and evict rounds older than
    /// `round_id - capacity + 1`. Round ids must be strictly increasing.
    pub fn push_round(&mut self, records: Vec<ExperienceRecord>, round_id: u32) -> Result<()> {
        if let Some((last, _)) = self.rounds.back() {
            if round_id <= *last {
                return Err(Error::contract(format!(
                    "round id {round_id} not greater than last pushed {last}"
                )));
            }
        }
        self.rounds.push_back((round_id, records));
        while let Some((front, _)) = self.rounds.front() {
            if *front + self.capacity as u32 <= round_id {
                self.rounds.pop_front();
            } else {
                break;
            }
        }
        Ok(())
    }
}

/// Resolved per-run context: grid geometry, budget, and the derived
/// sub-configurations.
#[derive(Debug, Clone)]
pub struct Session {
    pub config: Config,
    pub side: usize,
    pub channels: usize,
    pub budget: usize,
    pub recon_cfg: ReconNetConfig,
    pub sample_cfg: SampleNetConfig,
    pub mcts_cfg: MctsConfig,
}

impl Session {
    pub fn new(config: Config, side: usize, channels: usize) -> Result<Self> {
        let budget = config.budget(side);
        if budget > side {
            return Err(Error::budget(format!(
                "budget {budget} exceeds side {side}"
            )));
        }
        let sample_cfg = config.samplenet_cfg(channels, side);
        sample_cfg.block_count()?;
        let recon_cfg = config.reconnet_cfg(channels);
        let mcts_cfg = config.mcts_cfg(budget);
        let session = Session {
            config,
            side,
            channels,
            budget,
            recon_cfg,
            sample_cfg,
            mcts_cfg,
        };
        if session.initial_pattern().budget() >= budget {
            return Err(Error::budget(format!(
                "budget {budget} leaves no lines to choose after the initial pattern"
            )));
        }
        Ok(session)
    }

    pub fn initial_pattern(&self) -> LineMask {
        match self.config.training.initial_pattern {
            InitialPattern::Dc => {
                let mut mask = LineMask::empty(self.side);
                mask.set(0, true);
                mask
            }
            InitialPattern::Empty => LineMask::empty(self.side),
        }
    }

    /// Freshly initialized parameter stores, derived from the master seed.
    pub fn init_stores(&self) -> Result<(ParameterStore, ParameterStore)> {
        let mut recon_rng =
            ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed, Tag::InitRecon as u64, 0, 0));
        let mut sample_rng =
            ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed, Tag::InitSample as u64, 0, 0));
        Ok((
            reconnet::init_params(&self.recon_cfg, &mut recon_rng),
            samplenet::init_params(&self.sample_cfg, &mut sample_rng)?,
        ))
    }
}

#[repr(u64)]
enum Tag {
    InitRecon = 1,
    InitSample = 2,
    Select = 3,
    Episode = 4,
    TrainBatch = 5,
    EvalPattern = 6,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic stream seed for (master, purpose, coordinates). Every RNG in
/// the trainer derives from these, so (seed, round) is the entire RNG state.
pub fn stream_seed(master: u64, tag: u64, a: u64, b: u64) -> u64 {
    splitmix(master ^ splitmix(tag ^ splitmix(a ^ splitmix(b))))
}

/// The records and terminal quality of one self-play episode.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub records: Vec<ExperienceRecord>,
    pub final_pattern: LineMask,
    pub final_reward: f64,
}

/// Play one episode: repeat tree search, record the improved policy, commit a
/// line drawn from it (training explores), re-root, until the budget is
/// reached. One search tree persists across the whole episode.
pub fn run_episode(
    image: &Image,
    recon_store: &ParameterStore,
    sample_store: &ParameterStore,
    session: &Session,
    round_id: u32,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeOutcome> {
    let guide = NetGuide::new(
        image,
        recon_store,
        &session.recon_cfg,
        sample_store,
        &session.sample_cfg,
        session.mcts_cfg.reward_psnr_scale,
    )?;
    let mut pattern = session.initial_pattern();
    let mut tree = SearchTree::new();
    let mut records = Vec::new();
    let mut t = 0usize;
    while pattern.budget() < session.budget {
        tree.run(&pattern, &guide, &session.mcts_cfg, rng)?;
        let policy = tree.policy(session.side)?;
        let zero_fill = guide.zero_fill(&pattern)?;
        let recon_at_t = guide.reconstruct(&pattern)?;
        records.push(ExperienceRecord {
            pattern: pattern.clone(),
            zero_fill,
            target_image: image.clone(),
            mcts_policy: policy.clone(),
            recon_at_t,
            round_id,
            t,
        });
        let line = policy.sample(rng);
        pattern.set(line, true);
        tree.commit(line);
        t += 1;
    }
    let final_reward = guide.reward(&pattern)?;
    Ok(EpisodeOutcome {
        records,
        final_pattern: pattern,
        final_reward,
    })
}

/// One round of replay training for both networks: uniform batches from
/// memory, step count capped by min(max iterations, max epochs). Returns the
/// mean losses over the steps taken.
pub fn train_round(
    memory: &ReplayMemory,
    recon_store: &mut ParameterStore,
    sample_store: &mut ParameterStore,
    session: &Session,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    if memory.is_empty() {
        return Err(Error::contract("training round with empty replay memory"));
    }
    let records: Vec<&ExperienceRecord> = memory.records().collect();
    let n = records.len();
    let batch_size = session.config.training.batch_size.max(1);
    let epoch_steps = n.div_ceil(batch_size);
    let steps = session
        .config
        .training
        .max_iterations_per_round
        .min(session.config.training.max_epochs_per_round * epoch_steps);
    let adam = session.config.adam();
    let momentum = session.config.network.bn_momentum;
    let mut recon_total = 0.0;
    let mut sample_total = 0.0;
    for _ in 0..steps {
        let picks: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..n)).collect();
        let recon_batch: Vec<(Image, Image)> = picks
            .iter()
            .map(|&i| (records[i].zero_fill.clone(), records[i].target_image.clone()))
            .collect();
        let sample_batch: Vec<(Image, PolicyVector)> = picks
            .iter()
            .map(|&i| (records[i].recon_at_t.clone(), records[i].mcts_policy.clone()))
            .collect();
        recon_total +=
            reconnet::train_step(&recon_batch, recon_store, &session.recon_cfg, &adam, momentum)?;
        sample_total += samplenet::train_step(
            &sample_batch,
            sample_store,
            &session.sample_cfg,
            &adam,
            momentum,
        )?;
    }
    Ok((recon_total / steps as f64, sample_total / steps as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: u32,
    pub mean_reward: f64,
    pub recon_loss: f64,
    pub sample_loss: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{}",
            self.round, self.mean_reward, self.recon_loss, self.sample_loss
        )
    }
}

#[derive(Debug)]
pub struct TrainSummary {
    pub final_round: u32,
    pub rows: Vec<MetricsRow>,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

fn checkpoint_path(out_dir: &Path, round: u32) -> PathBuf {
    out_dir.join(format!("checkpoint_round_{round:05}.amck"))
}

/// The full self-supervised loop. With `resume`, training continues from the
/// checkpointed round; the checkpoint must carry the same config and seed so
/// the continuation is bit-exact.
pub fn train(
    train_images: &[Image],
    session: &Session,
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<TrainSummary> {
    if train_images.is_empty() {
        return Err(Error::contract("empty training split"));
    }
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let master = session.config.seed;

    let (mut recon_store, mut sample_store, mut memory, start_round) = match resume {
        Some(ck) => {
            let ck_config = Config::from_json(&ck.config_json)?;
            if !ck_config.resume_compatible(&session.config) {
                return Err(Error::Config(
                    "resume checkpoint was written with an incompatible config".into(),
                ));
            }
            if ck.master_seed != master {
                return Err(Error::Config("resume checkpoint has a different seed".into()));
            }
            (ck.recon, ck.sample, ck.memory, ck.round)
        }
        None => {
            let (recon, sample) = session.init_stores()?;
            (
                recon,
                sample,
                ReplayMemory::new(session.config.training.replay_rounds),
                0,
            )
        }
    };

    let save = |round: u32,
                recon: &ParameterStore,
                sample: &ParameterStore,
                memory: &ReplayMemory|
     -> Result<PathBuf> {
        let path = checkpoint_path(out_dir, round);
        Checkpoint {
            round,
            master_seed: master,
            config_json: session.config.to_json(),
            recon: recon.clone(),
            sample: sample.clone(),
            memory: memory.clone(),
        }
        .save(&path)?;
        Ok(path)
    };

    let mut last_checkpoint = save(start_round, &recon_store, &sample_store, &memory)?;
    let metrics_path = out_dir.join("metrics.csv");
    let metrics_file = fs::File::create(&metrics_path)
        .map_err(|e| Error::io(format!("creating {}", metrics_path.display()), e))?;
    let mut metrics = std::io::BufWriter::new(metrics_file);
    let werr = |e| Error::io(format!("writing {}", metrics_path.display()), e);
    writeln!(metrics, "round,mean_reward,recon_loss,sample_loss").map_err(werr)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(session.config.training.workers)
        .build()
        .map_err(|e| Error::contract(format!("worker pool: {e}")))?;

    let total_rounds = session.config.training.rounds;
    let mut rows = Vec::new();
    for round in (start_round + 1)..=total_rounds {
        // Pick this round's training images.
        let mut selector =
            ChaCha8Rng::seed_from_u64(stream_seed(master, Tag::Select as u64, round as u64, 0));
        let mut indices: Vec<usize> = (0..train_images.len()).collect();
        indices.shuffle(&mut selector);
        indices.truncate(
            session
                .config
                .training
                .images_per_round
                .min(train_images.len()),
        );

        // Episodes in parallel; each worker owns its tree and RNG stream and
        // reads frozen parameter snapshots, so thread count cannot change the
        // results.
        let outcomes: Vec<Result<EpisodeOutcome>> = pool.install(|| {
            indices
                .par_iter()
                .enumerate()
                .map(|(slot, &img_idx)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
                        master,
                        Tag::Episode as u64,
                        round as u64,
                        slot as u64,
                    ));
                    run_episode(
                        &train_images[img_idx],
                        &recon_store,
                        &sample_store,
                        session,
                        round,
                        &mut rng,
                    )
                })
                .collect()
        });
        let mut records = Vec::new();
        let mut reward_total = 0.0;
        let mut episode_count = 0usize;
        for outcome in outcomes {
            let outcome = outcome?;
            reward_total += outcome.final_reward;
            episode_count += 1;
            records.extend(outcome.records);
        }
        memory.push_round(records, round)?;

        let mut train_rng =
            ChaCha8Rng::seed_from_u64(stream_seed(master, Tag::TrainBatch as u64, round as u64, 0));
        let (recon_loss, sample_loss) = train_round(
            &memory,
            &mut recon_store,
            &mut sample_store,
            session,
            &mut train_rng,
        )?;

        let row = MetricsRow {
            round,
            mean_reward: reward_total / episode_count as f64,
            recon_loss,
            sample_loss,
        };
        writeln!(metrics, "{}", row.csv_line()).map_err(werr)?;
        rows.push(row);

        let every = session.config.training.checkpoint_every.max(1);
        if round % every == 0 || round == total_rounds {
            last_checkpoint = save(round, &recon_store, &sample_store, &memory)?;
        }
    }
    metrics.flush().map_err(werr)?;

    Ok(TrainSummary {
        final_round: total_rounds.max(start_round),
        rows,
        checkpoint_path: last_checkpoint,
        metrics_path,
    })
}

/// Test-time progressive sampling: no tree search, each line is the argmax of
/// the policy on the current reconstruction. Returns the mask after every
/// acquired line; the last entry holds `budget` lines.
pub fn progressive_trajectory(
    image: &Image,
    recon_store: &ParameterStore,
    sample_store: &ParameterStore,
    session: &Session,
) -> Result<Vec<LineMask>> {
    let guide = NetGuide::new(
        image,
        recon_store,
        &session.recon_cfg,
        sample_store,
        &session.sample_cfg,
        session.mcts_cfg.reward_psnr_scale,
    )?;
    let mut pattern = session.initial_pattern();
    let mut states = Vec::with_capacity(session.budget);
    if pattern.budget() > 0 {
        states.push(pattern.clone());
    }
    while pattern.budget() < session.budget {
        let policy = guide.prior(&pattern)?;
        pattern = extend_pattern(&pattern, &policy)?;
        states.push(pattern.clone());
    }
    Ok(states)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub image_id: String,
    pub method: String,
    pub psnr_db: f64,
}

fn baseline_pattern(
    kind: &str,
    session: &Session,
    image_index: usize,
) -> Result<LineMask> {
    let side = session.side;
    let budget = session.budget;
    let master = session.config.seed;
    match kind {
        "vds" => vds_pattern(&VdsParams {
            side,
            budget,
            density_exponent: session.config.vds.density_exponent,
            seed: stream_seed(master, Tag::EvalPattern as u64, image_index as u64, 0),
        }),
        "lpf" => lpf_pattern(side, budget),
        "uniform" => uniform_random_pattern(
            side,
            budget,
            stream_seed(master, Tag::EvalPattern as u64, image_index as u64, 1),
        ),
        other => Err(Error::Config(format!("unknown baseline pattern {other:?}"))),
    }
}

fn baseline_reconstruction(kind: &str, image: &Image, mask: &LineMask, session: &Session) -> Result<Image> {
    match kind {
        "zf" => zero_fill_reconstruct(image, mask),
        "tv" => {
            let measured = mask_spectrum(&dft2_forward(image)?, mask)?;
            let solved = tv_reconstruct(&measured, mask, &session.config.tv_cfg())?;
            Ok(if image.channels() == 1 {
                solved.image.real_channel()
            } else {
                solved.image
            })
        }
        other => Err(Error::Config(format!("unknown baseline recon {other:?}"))),
    }
}

fn baseline_rows_for(
    id: &str,
    image: &Image,
    index: usize,
    session: &Session,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for baseline in &session.config.evaluation.baselines {
        let (pattern_kind, recon_kind) = baseline.split_once('+').ok_or_else(|| {
            Error::Config(format!("baseline {baseline:?} is not <pattern>+<recon>"))
        })?;
        let mask = baseline_pattern(pattern_kind, session, index)?;
        let estimate = baseline_reconstruction(recon_kind, image, &mask, session)?;
        rows.push(EvalRow {
            image_id: id.to_string(),
            method: baseline.clone(),
            psnr_db: psnr(&estimate, image)?,
        });
    }
    Ok(rows)
}

/// The configured classical baselines alone; no networks involved.
pub fn evaluate_baselines(images: &[(String, Image)], session: &Session) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for (index, (id, image)) in images.iter().enumerate() {
        rows.extend(baseline_rows_for(id, image, index, session)?);
    }
    Ok(rows)
}

/// Per-image PSNR table: the learned pipeline, zero-fill under the learned
/// patterns, and every configured classical baseline. Deterministic given
/// (checkpoint, config, dataset). No tree search runs here, and ground truth
/// is touched only by the acquisition mask and the final PSNR.
pub fn evaluate(
    images: &[(String, Image)],
    recon_store: &ParameterStore,
    sample_store: &ParameterStore,
    session: &Session,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for (index, (id, image)) in images.iter().enumerate() {
        let guide = NetGuide::new(
            image,
            recon_store,
            &session.recon_cfg,
            sample_store,
            &session.sample_cfg,
            session.mcts_cfg.reward_psnr_scale,
        )?;
        let trajectory = progressive_trajectory(image, recon_store, sample_store, session)?;
        let final_pattern = trajectory.last().expect("budget >= 1");
        let recon = guide.reconstruct(final_pattern)?;
        rows.push(EvalRow {
            image_id: id.clone(),
            method: "ours".into(),
            psnr_db: psnr(&recon, image)?,
        });
        let zf = guide.zero_fill(final_pattern)?;
        rows.push(EvalRow {
            image_id: id.clone(),
            method: "ours+zf".into(),
            psnr_db: psnr(&zf, image)?,
        });
        rows.extend(baseline_rows_for(id, image, index, session)?);
    }
    Ok(rows)
}
