//! Training configuration, the optimizer and the training loop.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data_io::{build_vocabulary, DatasetManifest, EmbeddingTable, Vocabulary};
use crate::error::{MarnError, Result};
use crate::inference::{MetricReport, DEFAULT_IOU_THRESHOLDS, DEFAULT_RECALL_N};
use crate::model::{Marn, ModelConfig, ModelParams};
use crate::nn::Parameters;
use crate::pipeline::{evaluate_dataset, load_dataset, Dataset};

pub const SEED_ENV: &str = "MARN_SEED";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const RUN_LOG: &str = "run_log.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(alias = "β1")]
    pub beta1: f64,
    #[serde(alias = "β2")]
    pub beta2: f64,
    /// L2 penalty added to the gradient before the moment updates.
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub grad_clip_norm: f64,
    pub checkpoint_dir: PathBuf,
    /// Steps between progress log lines; every step is recorded regardless.
    pub log_every: usize,
    /// Single-threaded numerics. Per-sample gradients are always reduced in
    /// batch order, so this only pins the thread count.
    pub deterministic: bool,
    /// Worker threads when not deterministic; 0 lets rayon decide.
    pub threads: usize,
    pub min_word_count: usize,
    pub recall_n: Vec<usize>,
    pub iou_thresholds: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 32,
            epochs: 15,
            seed: 0,
            grad_clip_norm: 5.0,
            checkpoint_dir: PathBuf::from("checkpoints"),
            log_every: 10,
            deterministic: true,
            threads: 0,
            min_word_count: 1,
            recall_n: DEFAULT_RECALL_N.to_vec(),
            iou_thresholds: DEFAULT_IOU_THRESHOLDS.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| MarnError::Config(e.to_string()))
    }

    /// Reads a TOML config; relative `checkpoint_dir` values stay relative
    /// to the working directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| MarnError::io(path, e))?;
        toml::from_str(&text).map_err(|e| MarnError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `MARN_SEED` when set.
    pub fn apply_env_overrides(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| MarnError::Config(format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
        Ok(())
    }

    /// Checks everything except `model.vocab_size`, which is only known once
    /// the vocabulary is built.
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(MarnError::Config(m.to_string()));
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return err("optimizer.lr must be > 0");
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return err("optimizer betas must lie in [0, 1)");
        }
        if !(o.weight_decay >= 0.0 && o.eps > 0.0) {
            return err("optimizer.weight_decay must be >= 0 and eps > 0");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return err("epochs and batch_size must be >= 1");
        }
        if !(self.grad_clip_norm > 0.0) {
            return err("grad_clip_norm must be > 0");
        }
        if self.min_word_count == 0 {
            return err("min_word_count must be >= 1");
        }
        if self.recall_n.is_empty() || self.recall_n.contains(&0) {
            return err("recall_n must list positive cut-offs");
        }
        if self.iou_thresholds.is_empty()
            || self.iou_thresholds.iter().any(|t| !(0.0..=1.0).contains(t))
        {
            return err("iou_thresholds must lie in [0, 1]");
        }
        let probe = ModelConfig {
            vocab_size: self.model.vocab_size.max(crate::data_io::vocab::RESERVED.len() + 1),
            ..self.model.clone()
        };
        probe.validate()
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: OptimizerConfig,
    first: ModelParams,
    second: ModelParams,
    step: u64,
}

impl Adam {
    pub fn new(config: OptimizerConfig, params: &ModelParams) -> Self {
        Adam {
            config,
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ModelParams, grad: &ModelParams) {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let grads = grad.tensors();
        let firsts = self.first.tensors_mut();
        let seconds = self.second.tensors_mut();
        for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads).zip(firsts).zip(seconds) {
            for i in 0..p.data.len() {
                let gi = g.data[i] + c.weight_decay * p.data[i];
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

/// Rescales `grad` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grad: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = grad.sq_norm().sqrt();
    if norm > max_norm {
        grad.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    /// Batch means.
    pub proposal_loss: f64,
    pub clip_loss: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total: f64,
    pub validation: Option<MetricReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub lambda: f64,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl RunLog {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("run log serialises");
        fs::write(path, text).map_err(|e| MarnError::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_epoch: usize,
    pub run_log: RunLog,
    /// The model as of the last epoch.
    pub model: Marn,
    pub vocabulary: Vocabulary,
}

struct BatchResult {
    proposal: f64,
    clip: Option<f64>,
    grad: ModelParams,
}

fn batch_gradient(marn: &Marn, data: &Dataset, batch: &[usize]) -> Result<BatchResult> {
    let per_sample = batch
        .par_iter()
        .map(|&i| {
            let s = &data.samples[i];
            marn.loss_and_grad(data.video_of(s), &s.query)
        })
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut grad = marn.params.zeros_like();
    let mut proposal = 0.0;
    let mut clip: Option<f64> = None;
    // fixed reduction order keeps the sum independent of the thread count
    for (loss, g) in &per_sample {
        grad.add_scaled(scale, g);
        proposal += scale * loss.proposal.value;
        if let Some(c) = &loss.clip {
            *clip.get_or_insert(0.0) += scale * c.value;
        }
    }
    Ok(BatchResult { proposal, clip, grad })
}

/// Trains on `train` (its intervals are never read) and selects the
/// checkpoint with the best validation mIoU. The vocabulary is built from
/// the training sentences only.
pub fn train(
    config: &TrainConfig,
    train: &DatasetManifest,
    val: Option<&DatasetManifest>,
    embeddings: &EmbeddingTable,
) -> Result<TrainOutcome> {
    config.validate()?;
    let threads = if config.deterministic { 1 } else { config.threads };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| MarnError::Config(format!("cannot start worker threads: {e}")))?;
    pool.install(|| train_inner(config, train, val, embeddings))
}

fn train_inner(
    config: &TrainConfig,
    train: &DatasetManifest,
    val: Option<&DatasetManifest>,
    embeddings: &EmbeddingTable,
) -> Result<TrainOutcome> {
    if embeddings.dim != config.model.d_w {
        return Err(MarnError::Config(format!(
            "embedding table is {}-dim but d_w = {}",
            embeddings.dim, config.model.d_w
        )));
    }
    let train = train.without_intervals();
    let vocabulary = build_vocabulary(&train, embeddings, config.min_word_count)?;
    let model_config = ModelConfig {
        vocab_size: vocabulary.len(),
        ..config.model.clone()
    };
    let (t, d_v, max_len) = (model_config.t, model_config.d_v, model_config.max_query_len);
    let train_data = load_dataset(&train, &vocabulary, t, d_v, max_len)?;
    let val_data = match val {
        Some(v) => {
            v.require_intervals()?;
            Some(load_dataset(v, &vocabulary, t, d_v, max_len)?)
        }
        None => None,
    };
    log::info!(
        "training on {} queries ({} videos), vocabulary of {} tokens",
        train_data.len(),
        train_data.videos.len(),
        vocabulary.len()
    );

    let mut marn = Marn::new(model_config.clone(), config.seed)?;
    // parameters stay f32-representable so checkpoints are lossless
    marn.params.round_to_f32();
    let mut adam = Adam::new(config.optimizer.clone(), &marn.params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);

    fs::create_dir_all(&config.checkpoint_dir)
        .map_err(|e| MarnError::io(&config.checkpoint_dir, e))?;
    let best_path = config.checkpoint_dir.join(BEST_CHECKPOINT);
    let last_path = config.checkpoint_dir.join(LAST_CHECKPOINT);
    let log_path = config.checkpoint_dir.join(RUN_LOG);
    let mut run_log = RunLog {
        lambda: model_config.lambda,
        ..RunLog::default()
    };
    let mut best: Option<(usize, f64)> = None;
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_total = 0.0;
        let mut n_batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let diverged = |reason: String| {
                let ids: Vec<&str> = batch
                    .iter()
                    .map(|&i| train_data.samples[i].query_id.as_str())
                    .collect();
                MarnError::Numeric(format!(
                    "{reason} at step {} (epoch {epoch}), batch {ids:?}",
                    adam.steps() + 1
                ))
            };
            let mut r = batch_gradient(&marn, &train_data, batch).map_err(|e| match e {
                MarnError::Numeric(m) => diverged(m),
                other => other,
            })?;
            let total = crate::reconstruction::combine_losses(r.proposal, r.clip, model_config.lambda);
            if !total.is_finite() || !r.grad.all_finite() {
                return Err(diverged("non-finite loss or gradient".into()));
            }
            let grad_norm = clip_grad_norm(&mut r.grad, config.grad_clip_norm);
            adam.step(&mut marn.params, &r.grad);
            marn.params.round_to_f32();
            let step = adam.steps() as usize;
            run_log.steps.push(StepRecord {
                step,
                epoch,
                proposal_loss: r.proposal,
                clip_loss: r.clip,
                total,
                grad_norm,
            });
            if step % config.log_every.max(1) == 0 {
                log::info!("epoch {epoch} step {step}: loss {total:.4} (grad norm {grad_norm:.3})");
            }
            epoch_total += total;
            n_batches += 1;
        }
        let validation = match &val_data {
            Some(v) => Some(evaluate_dataset(&marn, v, &config.recall_n, &config.iou_thresholds)?.0),
            None => None,
        };
        let mean_total = epoch_total / n_batches as f64;
        match &validation {
            Some(rep) => log::info!(
                "epoch {epoch}: mean loss {mean_total:.4}, val mIoU {:.4}",
                rep.miou
            ),
            None => log::info!("epoch {epoch}: mean loss {mean_total:.4}"),
        }
        save_checkpoint(&last_path, &model_config, &marn.params, &vocabulary)?;
        // without a validation split the latest epoch counts as the best
        let score = validation.as_ref().map_or(f64::INFINITY, |r| r.miou);
        if best.is_none_or(|(_, b)| score > b || score == f64::INFINITY) {
            best = Some((epoch, score));
            save_checkpoint(&best_path, &model_config, &marn.params, &vocabulary)?;
        }
        run_log.epochs.push(EpochRecord {
            epoch,
            mean_total,
            validation,
        });
        run_log.write(&log_path)?;
    }
    Ok(TrainOutcome {
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        best_epoch: best.map_or(config.epochs, |b| b.0),
        run_log,
        model: marn,
        vocabulary,
    })
}
