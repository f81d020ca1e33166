//! `petkit` — parameter-efficient tuning toolkit for ConvNets.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use petkit_core::analysis::{Bandwidth, MmdEstimator};
use petkit_core::synth::{CountingFamily, OrientationFamily, SynthKind, TextureFamily};

use petkit::config::{load_run_config, RunConfig};
use petkit::metrics::sig6;
use petkit::run;

#[derive(Parser)]
#[command(name = "petkit", version, about = "Conv-Adapter tuning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sweeps and evaluation.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

impl Common {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = load_run_config(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train under the configured tuning mode; writes metrics.csv,
    /// summary.json and checkpoint.petk.
    Train(Common),
    /// Evaluate a checkpoint; optionally dump penultimate features.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset container to evaluate (default: config test, else train).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Write post-pool features of the dataset to this file.
        #[arg(long)]
        dump_features: Option<PathBuf>,
    },
    /// Grid search over lr / weight decay / gamma; writes trials.csv and
    /// best.json.
    Sweep(Common),
    /// Per-mode trainable-parameter table with closed-form cross-checks.
    CountParams(Common),
    /// Similarity analyses over checkpoints or feature dumps.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Finite-difference gradient checks over all primitives and schemes.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        /// Where to write report.json.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Generate a synthetic dataset container.
    GenData {
        /// texture | counting | orientation
        #[arg(long)]
        kind: String,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long, default_value_t = 16)]
        image_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep only this many samples per class (few-shot subset).
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Texture/orientation: angle offset in radians.
        #[arg(long, default_value_t = 0.0)]
        angle_offset: f32,
        /// Texture: grating frequency (cycles per image).
        #[arg(long, default_value_t = 3.0)]
        frequency: f32,
        /// Counting: blob sigma in pixels.
        #[arg(long, default_value_t = 1.3)]
        blob_sigma: f32,
        /// Counting: blob amplitude.
        #[arg(long, default_value_t = 0.9)]
        amplitude: f32,
        /// Additive pixel noise amplitude.
        #[arg(long)]
        noise: Option<f32>,
    },
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Mean CKA between the convolution filters of two checkpoints.
    Cka {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Gaussian-kernel MMD between two feature dumps.
    Mmd {
        #[arg(long)]
        p: PathBuf,
        #[arg(long)]
        q: PathBuf,
        /// `median` or a fixed sigma.
        #[arg(long, default_value = "median")]
        bandwidth: String,
        #[arg(long)]
        unbiased: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(ok) => {
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch() -> anyhow::Result<bool> {
    match Cli::parse().command {
        Command::Train(common) => {
            let cfg = common.load()?;
            let summary = run::cmd_train(&cfg, common.threads)?;
            println!(
                "mode {}  epochs {}  train_loss {}  val_acc {}  test_acc {}  trainable {}  ({} of full fine-tuning)  wall {}s",
                summary.mode,
                summary.epochs_completed,
                summary.final_train_loss.map(sig6).unwrap_or_else(|| "-".into()),
                summary.final_val_accuracy.map(sig6).unwrap_or_else(|| "-".into()),
                summary.test_accuracy.map(sig6).unwrap_or_else(|| "-".into()),
                summary.trainable_params,
                sig6(summary.fraction_of_full_ft),
                sig6(summary.wall_seconds),
            );
            if summary.diverged {
                eprintln!("training diverged; metrics are partial");
            }
            if !summary.freeze_invariant_ok {
                eprintln!("freeze invariant violated: frozen parameters changed");
            }
            Ok(summary.ok())
        }
        Command::Evaluate {
            common,
            checkpoint,
            dataset,
            dump_features,
        } => {
            let cfg = common.load()?;
            let summary = run::cmd_evaluate(
                &cfg,
                &checkpoint,
                dataset.as_deref(),
                dump_features.as_deref(),
                common.threads,
            )?;
            println!(
                "top-1 accuracy {} on {} ({} samples)",
                sig6(summary.top1_accuracy),
                summary.dataset,
                summary.samples
            );
            Ok(true)
        }
        Command::Sweep(common) => {
            let cfg = common.load()?;
            let summary = run::cmd_sweep(&cfg, common.threads)?;
            for t in &summary.trials {
                println!(
                    "lr {}  wd {}  gamma {}  val_acc {}  trainable {}{}",
                    sig6(t.lr),
                    sig6(t.weight_decay),
                    t.gamma.map(|g| g.to_string()).unwrap_or_else(|| "-".into()),
                    sig6(t.val_accuracy),
                    t.trainable_params,
                    if t.diverged { "  [diverged]" } else { "" }
                );
            }
            println!(
                "best: lr {}  wd {}  gamma {}  val_acc {}",
                sig6(summary.best.lr),
                sig6(summary.best.weight_decay),
                summary
                    .best
                    .gamma
                    .map(|g| g.to_string())
                    .unwrap_or_else(|| "-".into()),
                sig6(summary.best.val_accuracy)
            );
            Ok(true)
        }
        Command::CountParams(common) => {
            let cfg = common.load()?;
            let report = run::cmd_count_params(&cfg)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            petkit::metrics::write_json(&cfg.out_dir.join("report.json"), &report)?;
            println!("total parameters: {}", report.total_params);
            println!(
                "{:<28} {:>14} {:>12} {:>14} {:>8}",
                "mode", "trainable", "frac_of_ft", "frac_no_head", "check"
            );
            for r in &report.rows {
                println!(
                    "{:<28} {:>14} {:>12} {:>14} {:>8}",
                    r.mode,
                    r.trainable_params,
                    sig6(r.fraction_of_full_ft),
                    sig6(r.fraction_without_head),
                    if r.closed_form_matches_enumeration { "ok" } else { "MISMATCH" }
                );
            }
            Ok(report.ok())
        }
        Command::Analyze(analyze) => match analyze {
            AnalyzeCommand::Cka { a, b, out } => {
                let summary = run::cmd_analyze_cka(&a, &b, &out)?;
                println!("mean CKA {}", sig6(summary.mean_cka));
                Ok(true)
            }
            AnalyzeCommand::Mmd {
                p,
                q,
                bandwidth,
                unbiased,
                out,
            } => {
                let bw = match bandwidth.as_str() {
                    "median" => Bandwidth::Median,
                    other => Bandwidth::Fixed(
                        other
                            .parse()
                            .with_context(|| format!("bad bandwidth `{other}`"))?,
                    ),
                };
                let est = if unbiased {
                    MmdEstimator::Unbiased
                } else {
                    MmdEstimator::Biased
                };
                let summary = run::cmd_analyze_mmd(&p, &q, bw, est, &out)?;
                println!(
                    "MMD {} (sigma {})",
                    sig6(summary.mmd),
                    sig6(summary.bandwidth)
                );
                Ok(true)
            }
        },
        Command::Gradcheck {
            seeds,
            epsilon,
            tolerance,
            out,
        } => {
            let report = run::cmd_gradcheck(seeds, epsilon, tolerance)?;
            std::fs::create_dir_all(&out)?;
            petkit::metrics::write_json(&out.join("report.json"), &report)?;
            for c in &report.checks {
                println!(
                    "{:<26} max_rel_err {:>12}  {}",
                    c.name,
                    sig6(c.max_rel_error),
                    if c.passed { "pass" } else { "FAIL" }
                );
            }
            println!("gradcheck: {}", if report.all_passed { "pass" } else { "FAIL" });
            Ok(report.all_passed)
        }
        Command::GenData {
            kind,
            classes,
            per_class,
            image_size,
            seed,
            shots,
            out,
            angle_offset,
            frequency,
            blob_sigma,
            amplitude,
            noise,
        } => {
            let kind = match kind.as_str() {
                "texture" => {
                    let mut f = TextureFamily {
                        orientation_offset: angle_offset,
                        frequency,
                        ..TextureFamily::default()
                    };
                    if let Some(n) = noise {
                        f.noise = n;
                    }
                    SynthKind::Texture(f)
                }
                "counting" => {
                    let mut f = CountingFamily {
                        blob_sigma,
                        amplitude,
                        ..CountingFamily::default()
                    };
                    if let Some(n) = noise {
                        f.noise = n;
                    }
                    SynthKind::Counting(f)
                }
                "orientation" => {
                    let mut f = OrientationFamily {
                        angle_offset,
                        ..OrientationFamily::default()
                    };
                    if let Some(n) = noise {
                        f.noise = n;
                    }
                    SynthKind::Orientation(f)
                }
                other => bail!("unknown kind `{other}` (texture | counting | orientation)"),
            };
            let summary =
                run::cmd_gen_data(&kind, classes, per_class, image_size, seed, shots, &out)?;
            println!(
                "wrote {} samples ({} classes, {}x{}) to {}  checksum {}",
                summary.samples,
                summary.classes,
                summary.image_size,
                summary.image_size,
                summary.path,
                summary.file_checksum
            );
            Ok(true)
        }
    }
}
