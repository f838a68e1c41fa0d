//! Seeded training runs and multi-mode comparisons.
//!
//! [`train`] runs the standard loop: per batch, forward on a fresh tape,
//! cross-entropy loss, backward, optimizer step, running-stat update; per
//! epoch, a metrics record. Artifacts land in the configured output
//! directory: `metrics.csv`, `weights.csv`, `summary.txt`, `model.ckpt`.
//! Every artifact embeds the resolved config and the dataset content hash.
//!
//! Reproducibility contract: all randomness (initialization, subsampling,
//! shuffle order) derives from the single config seed, so identical configs
//! produce byte-identical `metrics.csv` and `weights.csv`. Wall-clock
//! timings are measured and kept in the in-memory records, but written to
//! the CSV as `0.000` unless `log_timing` is set; a volatile column would
//! break artifact comparability. [`compare_modes`] trains `R` rounds per
//! mode with seeds `base+1 ..= base+R` and reports each mode's final test
//! accuracy and its relative improvement over the fixed-weight baseline.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{self, Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::nn::{build_model, AdaSkipMode, Model, ModelConfig, SkipWeight};
use crate::optim::{sgd_step, Adam, AdamConfig};
use crate::tensor::argmax_rows;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

/// Everything one training run depends on.
#[derive(Debug, Clone, Serialize)]
pub struct TrainConfig {
    pub dataset: String,
    #[serde(skip)]
    pub data_dir: PathBuf,
    /// Stratified training subset size; 0 = the full set.
    pub subsample_train: usize,
    /// Stratified test subset size; 0 = the full set.
    pub subsample_test: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f32,
    pub mode: AdaSkipMode,
    pub init_skip_weight: f32,
    pub seed: u64,
    #[serde(skip)]
    pub out_dir: PathBuf,
    /// Baseline build with plain addition at every skip site (library-level
    /// oracle; not a CLI mode).
    pub plain_residual: bool,
    /// Write measured wall seconds into metrics.csv instead of 0.000.
    pub log_timing: bool,
}

impl TrainConfig {
    /// Desk-scale defaults: stratified 5000/1000 split, five epochs,
    /// batches of 64, Adam at 1e-3.
    pub fn desk_scale(dataset: DatasetKind, data_dir: PathBuf, out_dir: PathBuf) -> Self {
        Self {
            dataset: dataset.name().to_string(),
            data_dir,
            subsample_train: 5000,
            subsample_test: 1000,
            epochs: 5,
            batch_size: 64,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            mode: AdaSkipMode::PerBlock,
            init_skip_weight: 0.0,
            seed: 42,
            out_dir,
            plain_residual: false,
            log_timing: false,
        }
    }

    pub fn kind(&self) -> Result<DatasetKind> {
        DatasetKind::parse(&self.dataset)
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// Per-epoch measurements. `seconds` is always measured; whether it reaches
/// the CSV is the config's choice.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub train_acc: f32,
    pub test_acc: f32,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<MetricsRecord>,
    pub weights: Vec<SkipWeight>,
    pub dataset_hash: u64,
}

const EVAL_BATCH: usize = 256;
// Separates the test split's subsample stream from the train split's.
const TEST_SUBSAMPLE_TAG: u64 = 0x74657374;

fn accuracy(model: &Model, ds: &Dataset) -> Result<f32> {
    let mut correct = 0usize;
    for (images, labels) in data::batches(ds, EVAL_BATCH, 0, 0, false) {
        let logits = model.logits_no_grad(&images)?;
        for (pred, label) in argmax_rows(&logits)?.iter().zip(&labels) {
            if *pred == usize::from(*label) {
                correct += 1;
            }
        }
    }
    Ok(correct as f32 / ds.len() as f32)
}

fn load_splits(config: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let kind = config.kind()?;
    let (train_full, test_full) = data::load_dir(kind, &config.data_dir)?;
    let train = if config.subsample_train == 0 {
        train_full
    } else {
        data::subsample(&train_full, config.subsample_train, config.seed)?
    };
    let test = if config.subsample_test == 0 {
        test_full
    } else {
        data::subsample(&test_full, config.subsample_test, config.seed ^ TEST_SUBSAMPLE_TAG)?
    };
    Ok((train, test))
}

/// Runs one full training job and writes its artifacts.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let (train_ds, test_ds) = load_splits(config)?;
    let dataset_hash = train_ds.content_hash ^ test_ds.content_hash.rotate_left(1);

    let mut model_config = ModelConfig::mini(
        train_ds.image_shape(),
        train_ds.num_classes,
        config.mode,
        config.seed,
    );
    model_config.init_skip_weight = config.init_skip_weight;
    model_config.plain_residual = config.plain_residual;
    let mut model = build_model(model_config)?;

    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });

    std::fs::create_dir_all(&config.out_dir)?;
    let config_json = serde_json::to_string(config)
        .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
    let mut metrics_csv = MetricsCsv::create(
        &config.out_dir.join("metrics.csv"),
        &config_json,
        dataset_hash,
        config.log_timing,
    )?;

    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let epoch_start = Instant::now();
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (batch_idx, (images, labels)) in
            data::batches(&train_ds, config.batch_size, config.seed, epoch, true).enumerate()
        {
            let onehot = data::one_hot(&labels, train_ds.num_classes)?;
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &images, true)?;
            let loss_node = tape.softmax_cross_entropy(pass.logits, &onehot)?;
            let loss = tape.value(loss_node).item();
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch_idx + 1,
                    loss,
                });
            }
            // training accuracy from the same forward pass, pre-update
            for (pred, label) in argmax_rows(tape.value(pass.logits))?.iter().zip(&labels) {
                if *pred == usize::from(*label) {
                    correct += 1;
                }
            }
            loss_sum += f64::from(loss) * labels.len() as f64;
            let grads = tape.backward(loss_node)?;
            drop(tape);
            // a blown-up step can surface as non-finite gradients before the
            // loss itself leaves the finite range; report both as divergence
            // at this batch
            let step_result = model.apply_gradients(&grads).and_then(|()| match config.optimizer {
                OptimizerKind::Sgd => sgd_step(&mut model.params, config.lr),
                OptimizerKind::Adam => adam.step(&mut model.params),
            });
            match step_result {
                Ok(()) => {}
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::Divergence {
                        epoch,
                        batch: batch_idx + 1,
                        loss,
                    })
                }
                Err(other) => return Err(other),
            }
            model.apply_bn_updates(pass.bn_updates);
        }
        let test_acc = accuracy(&model, &test_ds)?;
        let record = MetricsRecord {
            epoch,
            train_loss: (loss_sum / train_ds.len() as f64) as f32,
            train_acc: correct as f32 / train_ds.len() as f32,
            test_acc,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        metrics_csv.append(&record)?;
        metrics.push(record);
    }

    let weights = model.extract_skip_weights();
    let sites: Vec<String> = weights.iter().map(|w| w.site.clone()).collect();
    let values: Vec<f32> = weights.iter().map(|w| w.value).collect();
    write_weights_csv(
        &config.out_dir.join("weights.csv"),
        &config_json,
        dataset_hash,
        &sites,
        &[values],
    )?;
    model.save(&config.out_dir.join("model.ckpt"))?;
    write_train_summary(&config.out_dir.join("summary.txt"), config, &metrics, &weights, dataset_hash)?;

    Ok(TrainOutcome {
        model,
        metrics,
        weights,
        dataset_hash,
    })
}

// Append-only CSV with the config and dataset hash embedded as comments.
struct MetricsCsv {
    file: std::fs::File,
    log_timing: bool,
}

impl MetricsCsv {
    fn create(path: &Path, config_json: &str, dataset_hash: u64, log_timing: bool) -> Result<Self> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "# config: {config_json}")?;
        writeln!(file, "# dataset_hash: {dataset_hash:016x}")?;
        writeln!(file, "epoch,train_loss,train_acc,test_acc,seconds")?;
        Ok(Self { file, log_timing })
    }

    fn append(&mut self, r: &MetricsRecord) -> Result<()> {
        let seconds = if self.log_timing { r.seconds } else { 0.0 };
        writeln!(
            self.file,
            "{},{:.6},{:.6},{:.6},{seconds:.3}",
            r.epoch, r.train_loss, r.train_acc, r.test_acc
        )?;
        self.file.flush()?;
        Ok(())
    }
}

/// `site,round_1..round_R` with one column per round.
pub fn write_weights_csv(
    path: &Path,
    config_json: &str,
    dataset_hash: u64,
    sites: &[String],
    rounds: &[Vec<f32>],
) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# config: {config_json}\n"));
    out.push_str(&format!("# dataset_hash: {dataset_hash:016x}\n"));
    out.push_str("site");
    for r in 1..=rounds.len() {
        out.push_str(&format!(",round_{r}"));
    }
    out.push('\n');
    for (i, site) in sites.iter().enumerate() {
        out.push_str(site);
        for round in rounds {
            out.push_str(&format!(",{}", round[i]));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_train_summary(
    path: &Path,
    config: &TrainConfig,
    metrics: &[MetricsRecord],
    weights: &[SkipWeight],
    dataset_hash: u64,
) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!(
        "training run: dataset={} mode={} seed={}\n",
        config.dataset,
        config.mode.label(),
        config.seed
    ));
    out.push_str(&format!("dataset_hash: {dataset_hash:016x}\n"));
    out.push_str(&format!(
        "config: {}\n\n",
        serde_json::to_string(config).unwrap_or_default()
    ));
    if let Some(last) = metrics.last() {
        out.push_str(&format!(
            "final: epoch={} train_loss={:.6} train_acc={:.4} test_acc={:.4}\n",
            last.epoch, last.train_loss, last.train_acc, last.test_acc
        ));
    }
    let total: f64 = metrics.iter().map(|m| m.seconds).sum();
    out.push_str(&format!("wall_seconds_total: {total:.1}\n\n"));
    out.push_str("final skip weights:\n");
    for w in weights {
        out.push_str(&format!(
            "  {} = {}{}\n",
            w.site,
            w.value,
            if w.trainable { "" } else { " (fixed)" }
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Mode comparison
// ---------------------------------------------------------------------------

pub struct RoundOutcome {
    pub round: usize,
    pub seed: u64,
    pub final_test_acc: f32,
    pub weights: Vec<SkipWeight>,
    pub metrics: Vec<MetricsRecord>,
}

pub struct ModeOutcome {
    pub mode: AdaSkipMode,
    pub rounds: Vec<RoundOutcome>,
}

impl ModeOutcome {
    pub fn mean_final_test_acc(&self) -> f32 {
        self.rounds.iter().map(|r| r.final_test_acc).sum::<f32>() / self.rounds.len() as f32
    }

    /// Sites x rounds matrix of final weights.
    pub fn weight_table(&self) -> (Vec<String>, Vec<Vec<f32>>) {
        let sites: Vec<String> = self.rounds[0].weights.iter().map(|w| w.site.clone()).collect();
        let rounds = self
            .rounds
            .iter()
            .map(|r| r.weights.iter().map(|w| w.value).collect())
            .collect();
        (sites, rounds)
    }
}

pub struct Comparison {
    pub modes: Vec<ModeOutcome>,
    /// `(mode label, relative improvement over the Fixed(1.0) baseline)`,
    /// present when the baseline mode is part of the comparison.
    pub improvements: Vec<(String, f32)>,
}

fn mode_dir_name(mode: &AdaSkipMode) -> String {
    mode.label().replace(':', "_")
}

/// Trains every mode for `rounds` rounds (seed = base seed + round) and
/// aggregates accuracy and weight tables. Rounds run in parallel; each
/// round's artifacts land in `<out>/<mode>/round_<r>/`.
pub fn compare_modes(
    base: &TrainConfig,
    modes: &[AdaSkipMode],
    rounds: usize,
) -> Result<Comparison> {
    if modes.is_empty() {
        return Err(Error::Config("mode list is empty".into()));
    }
    if rounds == 0 {
        return Err(Error::Config("need at least one round".into()));
    }
    let jobs: Vec<(usize, AdaSkipMode, usize)> = modes
        .iter()
        .enumerate()
        .flat_map(|(mi, mode)| (1..=rounds).map(move |r| (mi, *mode, r)))
        .collect();
    let mut results: Vec<(usize, RoundOutcome)> = jobs
        .into_par_iter()
        .map(|(mi, mode, round)| {
            let mut cfg = base.clone();
            cfg.mode = mode;
            cfg.seed = base.seed + round as u64;
            cfg.out_dir = base
                .out_dir
                .join(mode_dir_name(&mode))
                .join(format!("round_{round}"));
            let outcome = train(&cfg)?;
            Ok((
                mi,
                RoundOutcome {
                    round,
                    seed: cfg.seed,
                    final_test_acc: outcome.metrics.last().map(|m| m.test_acc).unwrap_or(0.0),
                    weights: outcome.weights,
                    metrics: outcome.metrics,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    results.sort_by_key(|(mi, r)| (*mi, r.round));

    let mut mode_outcomes: Vec<ModeOutcome> = modes
        .iter()
        .map(|m| ModeOutcome {
            mode: *m,
            rounds: Vec::new(),
        })
        .collect();
    for (mi, round) in results {
        mode_outcomes[mi].rounds.push(round);
    }

    let config_json = serde_json::to_string(base)
        .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
    for outcome in &mode_outcomes {
        let dir = base.out_dir.join(mode_dir_name(&outcome.mode));
        std::fs::create_dir_all(&dir)?;
        let (sites, table) = outcome.weight_table();
        write_weights_csv(&dir.join("weights.csv"), &config_json, 0, &sites, &table)?;
        // per-epoch test accuracy, one column per round
        let mut acc = String::from("epoch");
        for r in 1..=outcome.rounds.len() {
            acc.push_str(&format!(",round_{r}"));
        }
        acc.push('\n');
        for e in 0..outcome.rounds[0].metrics.len() {
            acc.push_str(&format!("{}", e + 1));
            for round in &outcome.rounds {
                acc.push_str(&format!(",{:.6}", round.metrics[e].test_acc));
            }
            acc.push('\n');
        }
        std::fs::write(dir.join("accuracy.csv"), acc)?;
    }

    let baseline = mode_outcomes
        .iter()
        .find(|m| matches!(m.mode, AdaSkipMode::Fixed(c) if c == 1.0))
        .map(|m| m.mean_final_test_acc());
    let mut improvements = Vec::new();
    if let Some(base_acc) = baseline {
        for outcome in &mode_outcomes {
            let rel = (outcome.mean_final_test_acc() - base_acc) / base_acc;
            improvements.push((outcome.mode.label(), rel));
        }
    }

    let mut summary = String::new();
    summary.push_str(&format!("mode comparison: dataset={} rounds={rounds}\n", base.dataset));
    summary.push_str(&format!("base config: {config_json}\n\n"));
    for outcome in &mode_outcomes {
        summary.push_str(&format!("mode {}:\n", outcome.mode.label()));
        for r in &outcome.rounds {
            summary.push_str(&format!(
                "  round {} (seed {}): final test acc {:.4}\n",
                r.round, r.seed, r.final_test_acc
            ));
        }
        summary.push_str(&format!("  mean final test acc: {:.4}\n", outcome.mean_final_test_acc()));
    }
    if !improvements.is_empty() {
        summary.push_str("\nrelative improvement over fixed:1 baseline:\n");
        for (label, rel) in &improvements {
            summary.push_str(&format!("  {label}: {:+.2}%\n", rel * 100.0));
        }
    }
    std::fs::create_dir_all(&base.out_dir)?;
    std::fs::write(base.out_dir.join("summary.txt"), summary)?;

    Ok(Comparison {
        modes: mode_outcomes,
        improvements,
    })
}
