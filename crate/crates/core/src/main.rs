//! Command-line surface: dataset generation, training, evaluation, single
//! image reconstruction, pattern export and classical baselines.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use amri::checkpoint::Checkpoint;
use amri::config::Config;
use amri::data;
use amri::error::{Error, Result};
use amri::sampling::{lpf_pattern, uniform_random_pattern, vds_pattern, VdsParams};
use amri::selfplay::{self, Session};
use amri::signal::{dft2_forward, mask_spectrum, psnr, zero_fill_reconstruct, Image, LineMask};
use amri::tv::tv_reconstruct;

#[derive(Parser)]
#[command(
    name = "amri",
    version,
    about = "Desk-scale active accelerated MRI: learned progressive sampling + reconstruction"
)]
struct Cli {
    /// JSON configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset (AMRI files + manifest).
    GenData {
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 16)]
        side: usize,
    },
    /// Run the self-supervised training loop.
    Train {
        /// Dataset manifest path.
        #[arg(long)]
        data: PathBuf,
        /// Continue from a checkpoint (its config and seed take over).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Progressive sampling + reconstruction on the test split, against the
    /// configured baselines; writes evaluation.csv.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Reconstruct a single image with a chosen pattern and method.
    Reconstruct {
        /// Input image (.amri, or .pgm for grayscale import).
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long, value_enum)]
        pattern: PatternArg,
        /// Needed when the method or pattern uses the trained networks.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output AMRI path (defaults to <out-dir>/reconstruction.amri).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Dump the learned progressive pattern for an image as Boolean CSV,
    /// one row per acquired line.
    ExportPattern {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output CSV path (defaults to <out-dir>/pattern.csv).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Classical sampling + reconstruction baselines on the test split;
    /// writes baselines.csv. No checkpoint required.
    Baseline {
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    /// Zero-filled inverse transform.
    Zf,
    /// Total-variation solver.
    Tv,
    /// Trained reconstruction network.
    Reconnet,
}

#[derive(Clone, Copy, ValueEnum)]
enum PatternArg {
    Vds,
    Lpf,
    Uniform,
    /// Trained progressive sampler (requires --checkpoint).
    Learned,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli_config: &Option<PathBuf>, cli_seed: Option<u64>) -> Result<Config> {
    let mut config = match cli_config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli_seed {
        config.seed = seed;
    }
    Ok(config)
}

fn ensure_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn load_split_images(
    manifest_path: &Path,
    split: data::Split,
) -> Result<(data::DatasetManifest, Vec<(String, Image)>)> {
    let manifest = data::DatasetManifest::load(manifest_path)?;
    let images = manifest.load_split(manifest_path, split)?;
    Ok((manifest, images))
}

fn session_from_checkpoint(ck: &Checkpoint, side: usize, channels: usize) -> Result<Session> {
    let config = Config::from_json(&ck.config_json)?;
    Session::new(config, side, channels)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { count, side } => {
            let config = load_config(&cli.config, cli.seed)?;
            ensure_out_dir(&cli.out_dir)?;
            let manifest = data::generate_phantoms(
                &cli.out_dir,
                count,
                side,
                config.seed,
                config.dataset.train_fraction,
                config.dataset.val_fraction,
            )?;
            println!(
                "wrote {count} phantoms ({} train / {} val / {} test) and {}",
                manifest.train.len(),
                manifest.val.len(),
                manifest.test.len(),
                cli.out_dir.join("manifest.json").display()
            );
            Ok(())
        }
        Command::Train { data, resume } => {
            let resume_ck = resume.as_deref().map(Checkpoint::load).transpose()?;
            // On resume the checkpoint's config is authoritative; --config may
            // only adjust run-control fields (rounds, workers, cadence).
            let config = match &resume_ck {
                Some(ck) => match &cli.config {
                    Some(user) => Config::load(user)?,
                    None => Config::from_json(&ck.config_json)?,
                },
                None => load_config(&cli.config, cli.seed)?,
            };
            let (manifest, images) = load_split_images(&data, data::Split::Train)?;
            let session = Session::new(config, manifest.side, manifest.channels)?;
            ensure_out_dir(&cli.out_dir)?;
            let summary = selfplay::train(
                &images.iter().map(|(_, img)| img.clone()).collect::<Vec<_>>(),
                &session,
                &cli.out_dir,
                resume_ck,
            )?;
            for row in &summary.rows {
                println!(
                    "round {}: reward={:.4} recon_loss={:.6} sample_loss={:.4}",
                    row.round, row.mean_reward, row.recon_loss, row.sample_loss
                );
            }
            println!(
                "finished at round {}; checkpoint {}, metrics {}",
                summary.final_round,
                summary.checkpoint_path.display(),
                summary.metrics_path.display()
            );
            Ok(())
        }
        Command::Evaluate { data, checkpoint } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (manifest, images) = load_split_images(&data, data::Split::Test)?;
            let session = session_from_checkpoint(&ck, manifest.side, manifest.channels)?;
            ensure_out_dir(&cli.out_dir)?;
            let rows = selfplay::evaluate(&images, &ck.recon, &ck.sample, &session)?;
            let csv_rows: Vec<(String, String, f64)> = rows
                .iter()
                .map(|r| (r.image_id.clone(), r.method.clone(), r.psnr_db))
                .collect();
            let path = cli.out_dir.join("evaluation.csv");
            data::write_eval_csv(&path, &csv_rows)?;
            println!("wrote {} rows to {}", rows.len(), path.display());
            Ok(())
        }
        Command::Reconstruct {
            input,
            method,
            pattern,
            checkpoint,
            output,
        } => {
            let config = load_config(&cli.config, cli.seed)?;
            let image = data::load_any_image(&input)?;
            let side = image.side();
            let budget = config.budget(side);
            let ck = checkpoint.as_deref().map(Checkpoint::load).transpose()?;

            let mask: LineMask = match pattern {
                PatternArg::Vds => vds_pattern(&VdsParams {
                    side,
                    budget,
                    density_exponent: config.vds.density_exponent,
                    seed: config.seed,
                })?,
                PatternArg::Lpf => lpf_pattern(side, budget)?,
                PatternArg::Uniform => uniform_random_pattern(side, budget, config.seed)?,
                PatternArg::Learned => {
                    let ck = ck.as_ref().ok_or_else(|| {
                        Error::Config("--pattern learned requires --checkpoint".into())
                    })?;
                    let session = session_from_checkpoint(ck, side, image.channels())?;
                    let trajectory = selfplay::progressive_trajectory(
                        &image,
                        &ck.recon,
                        &ck.sample,
                        &session,
                    )?;
                    trajectory.last().expect("budget >= 1").clone()
                }
            };

            let recon = match method {
                MethodArg::Zf => zero_fill_reconstruct(&image, &mask)?,
                MethodArg::Tv => {
                    let measured = mask_spectrum(&dft2_forward(&image)?, &mask)?;
                    let solved = tv_reconstruct(&measured, &mask, &config.tv_cfg())?;
                    if image.channels() == 1 {
                        solved.image.real_channel()
                    } else {
                        solved.image
                    }
                }
                MethodArg::Reconnet => {
                    let ck = ck.as_ref().ok_or_else(|| {
                        Error::Config("--method reconnet requires --checkpoint".into())
                    })?;
                    let session = session_from_checkpoint(ck, side, image.channels())?;
                    let zf = zero_fill_reconstruct(&image, &mask)?;
                    amri::reconnet::forward(
                        &zf,
                        &ck.recon,
                        &session.recon_cfg,
                        amri::autodiff::Mode::Eval,
                    )?
                }
            };

            ensure_out_dir(&cli.out_dir)?;
            let out_path = output.unwrap_or_else(|| cli.out_dir.join("reconstruction.amri"));
            data::save_image(&out_path, &recon)?;
            println!(
                "sampled {} of {side} lines; psnr_db={}; wrote {}",
                mask.budget(),
                psnr(&recon, &image)?,
                out_path.display()
            );
            Ok(())
        }
        Command::ExportPattern {
            input,
            checkpoint,
            output,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let image = data::load_any_image(&input)?;
            let session = session_from_checkpoint(&ck, image.side(), image.channels())?;
            let trajectory =
                selfplay::progressive_trajectory(&image, &ck.recon, &ck.sample, &session)?;
            ensure_out_dir(&cli.out_dir)?;
            let path = output.unwrap_or_else(|| cli.out_dir.join("pattern.csv"));
            let mut text = String::new();
            for mask in &trajectory {
                let row: Vec<&str> = (0..mask.side())
                    .map(|line| if mask.is_sampled(line) { "1" } else { "0" })
                    .collect();
                text.push_str(&row.join(","));
                text.push('\n');
            }
            std::fs::write(&path, text)
                .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
            println!("wrote {} rows to {}", trajectory.len(), path.display());
            Ok(())
        }
        Command::Baseline { data } => {
            let config = load_config(&cli.config, cli.seed)?;
            let (manifest, images) = load_split_images(&data, data::Split::Test)?;
            let session = Session::new(config, manifest.side, manifest.channels)?;
            ensure_out_dir(&cli.out_dir)?;
            let rows = selfplay::evaluate_baselines(&images, &session)?;
            let csv_rows: Vec<(String, String, f64)> = rows
                .iter()
                .map(|r| (r.image_id.clone(), r.method.clone(), r.psnr_db))
                .collect();
            let path = cli.out_dir.join("baselines.csv");
            data::write_eval_csv(&path, &csv_rows)?;
            println!("wrote {} rows to {}", rows.len(), path.display());
            Ok(())
        }
    }
}
