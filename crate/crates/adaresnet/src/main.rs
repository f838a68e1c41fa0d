//! Command-line harness: train runs, mode comparisons, checkpoint
//! inspection, and weight-variance analysis.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use adaresnet::analysis;
use adaresnet::data::{synthetic, DatasetKind};
use adaresnet::experiment::{compare_modes, train, OptimizerKind, TrainConfig};
use adaresnet::nn::{AdaSkipMode, Model};
use adaresnet::{Error, Result};

#[derive(Parser)]
#[command(name = "adaresnet", version, about = "Residual networks with trainable skip weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics, weights, and a checkpoint.
    Train(RunArgs),
    /// Train several weighting modes across seeded rounds and compare them.
    Compare(CompareArgs),
    /// Print the skip weights stored in a checkpoint.
    Weights {
        /// Path to a model.ckpt file.
        checkpoint: PathBuf,
    },
    /// Within/between-group variance report over two weight tables.
    Analyze {
        /// weights.csv path, or the fixture names paper-table-1 / paper-table-2.
        group_a: String,
        /// Second weights.csv path or fixture name.
        group_b: String,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Dataset: mnist or cifar10.
    #[arg(long, default_value = "mnist")]
    dataset: String,
    /// Skip-weight mode: fixed:<c>, unified, per-type, or per-block.
    #[arg(long, default_value = "per-block")]
    mode: String,
    /// Initial value of every trainable skip weight.
    #[arg(long, default_value_t = 0.0)]
    init_weight: f32,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    /// sgd or adam.
    #[arg(long, default_value = "adam")]
    optimizer: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Stratified training subset size (0 = full set).
    #[arg(long, default_value_t = 5000)]
    subsample: usize,
    /// Stratified test subset size (0 = full set).
    #[arg(long, default_value_t = 1000)]
    subsample_test: usize,
    /// Directory with the dataset files.
    #[arg(long, env = "ADARESNET_DATA_DIR")]
    data_dir: PathBuf,
    /// Output directory for run artifacts.
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    /// Generate a synthetic stand-in corpus into --data-dir if the dataset
    /// files are missing.
    #[arg(long)]
    synthetic: bool,
    /// Write measured wall seconds into metrics.csv (off keeps artifacts
    /// byte-reproducible across invocations).
    #[arg(long)]
    log_timing: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated mode list.
    #[arg(long, default_value = "fixed:1,unified,per-type,per-block")]
    modes: String,
    /// Training rounds per mode; round r uses seed base+r.
    #[arg(long, default_value_t = 3)]
    rounds: usize,
}

fn parse_mode(s: &str) -> Result<AdaSkipMode> {
    match s {
        "unified" => Ok(AdaSkipMode::Unified),
        "per-type" => Ok(AdaSkipMode::PerType),
        "per-block" => Ok(AdaSkipMode::PerBlock),
        other => {
            if let Some(c) = other.strip_prefix("fixed:") {
                let value: f32 = c
                    .parse()
                    .map_err(|_| Error::Config(format!("bad fixed weight '{c}'")))?;
                Ok(AdaSkipMode::Fixed(value))
            } else {
                Err(Error::Config(format!(
                    "unknown mode '{other}' (expected fixed:<c>, unified, per-type, per-block)"
                )))
            }
        }
    }
}

impl RunArgs {
    fn to_config(&self) -> Result<TrainConfig> {
        let kind = DatasetKind::parse(&self.dataset)?;
        if self.synthetic {
            ensure_synthetic_data(kind, &self.data_dir, self.subsample, self.subsample_test)?;
        }
        Ok(TrainConfig {
            dataset: kind.name().to_string(),
            data_dir: self.data_dir.clone(),
            subsample_train: self.subsample,
            subsample_test: self.subsample_test,
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: OptimizerKind::parse(&self.optimizer)?,
            lr: self.lr,
            mode: parse_mode(&self.mode)?,
            init_skip_weight: self.init_weight,
            seed: self.seed,
            out_dir: self.out.clone(),
            plain_residual: false,
            log_timing: self.log_timing,
        })
    }
}

/// Writes a deterministic synthetic corpus in the real file formats when
/// the standard files are absent. Sized to cover the requested subsets
/// with stratification headroom.
fn ensure_synthetic_data(kind: DatasetKind, dir: &std::path::Path, train: usize, test: usize) -> Result<()> {
    let probe = match kind {
        DatasetKind::Mnist => dir.join("train-images-idx3-ubyte"),
        DatasetKind::Cifar10 => dir.join("data_batch_1.bin"),
    };
    if probe.exists() {
        return Ok(());
    }
    let train_n = (train.max(1000) * 6 / 5).div_ceil(10) * 10;
    let test_n = (test.max(200) * 6 / 5).div_ceil(10) * 10;
    eprintln!(
        "note: {} not found; writing synthetic {} corpus ({train_n} train / {test_n} test) to {}",
        probe.display(),
        kind.name(),
        dir.display()
    );
    synthetic::write_dataset_dir(kind, dir, train_n, test_n, 0x5eed)
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => {
            let config = args.to_config()?;
            let outcome = train(&config)?;
            for m in &outcome.metrics {
                println!(
                    "epoch {:>3}: train_loss {:.4} train_acc {:.4} test_acc {:.4} ({:.1}s)",
                    m.epoch, m.train_loss, m.train_acc, m.test_acc, m.seconds
                );
            }
            println!("final skip weights:");
            for w in &outcome.weights {
                println!(
                    "  {} = {}{}",
                    w.site,
                    w.value,
                    if w.trainable { "" } else { " (fixed)" }
                );
            }
            println!("artifacts in {}", config.out_dir.display());
        }
        Command::Compare(args) => {
            let config = args.run.to_config()?;
            let modes: Vec<AdaSkipMode> = args
                .modes
                .split(',')
                .map(|s| parse_mode(s.trim()))
                .collect::<Result<_>>()?;
            let comparison = compare_modes(&config, &modes, args.rounds)?;
            for mode in &comparison.modes {
                println!(
                    "mode {:<10} mean final test acc {:.4}",
                    mode.mode.label(),
                    mode.mean_final_test_acc()
                );
                for r in &mode.rounds {
                    println!("    round {} (seed {}): {:.4}", r.round, r.seed, r.final_test_acc);
                }
            }
            for (label, rel) in &comparison.improvements {
                println!("improvement over fixed:1 — {label}: {:+.2}%", rel * 100.0);
            }
            println!("artifacts in {}", config.out_dir.display());
        }
        Command::Weights { checkpoint } => {
            let model = Model::load(&checkpoint)?;
            println!("site,value,trainable");
            for w in model.extract_skip_weights() {
                println!("{},{},{}", w.site, w.value, w.trainable);
            }
        }
        Command::Analyze { group_a, group_b } => {
            let a = analysis::resolve_input(&group_a)?;
            let b = analysis::resolve_input(&group_b)?;
            let report = analysis::variance_report(&a, &b)?;
            print!("{}", report.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
