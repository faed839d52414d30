//! Autoencoder optimization: AdamW with a one-cycle schedule over batches of
//! (clean, noised) chunk pairs.

mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{backward, batch_loss, AutoencoderConfig, AutoencoderWeights, ChunkPair, ModelError, ObjectiveWeights};
use crate::tokenizer::{chunk_sequence, noise_view, TokenChunk, TokenSequence, TokenizerError};

pub use optim::{adamw_step, AdamHyper, OneCycle, OptimizerState};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("dataset has no trainable chunks")]
    EmptyDataset,
    #[error("loss diverged at epoch {epoch}, step {step}: {value}")]
    DivergedLoss { epoch: usize, step: usize, value: f64 },
    #[error("optimizer produced a non-finite weight at index {0}")]
    NonFiniteUpdate(usize),
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub sigma_aug: f64,
    pub temperature: f64,
    pub seed: u64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            max_lr: 1e-3,
            weight_decay: 3e-9,
            gamma: 0.05,
            sigma_aug: 0.05,
            temperature: 0.1,
            seed: 0,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }
}

impl TrainingConfig {
    /// Large-model regime: 150 epochs at `2e-5`.
    pub fn full_scale() -> Self {
        Self { epochs: 150, max_lr: 2e-5, ..Self::default() }
    }

    pub fn objective(&self) -> ObjectiveWeights {
        ObjectiveWeights { gamma: self.gamma, temperature: self.temperature }
    }

    pub fn schedule(&self, total_steps: usize) -> OneCycle {
        OneCycle {
            max_lr: self.max_lr,
            total_steps,
            pct_start: self.pct_start,
            div_factor: self.div_factor,
            final_div_factor: self.final_div_factor,
        }
    }

    /// `max_lr == 0` is accepted so that a run can be a no-op.
    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |what: &str| Err(TrainingError::InvalidConfig(what.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.max_lr >= 0.0 && self.max_lr.is_finite()) {
            return bad("max_lr must be a non-negative finite number");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.sigma_aug >= 0.0 && self.sigma_aug.is_finite()) {
            return bad("sigma_aug must be non-negative");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if !(self.pct_start > 0.0 && self.pct_start < 1.0) {
            return bad("pct_start must lie in (0, 1)");
        }
        if !(self.div_factor > 1.0 && self.final_div_factor > 1.0) {
            return bad("div_factor and final_div_factor must exceed 1");
        }
        Ok(())
    }
}

/// One optimizer update over a batch. Returns the pre-update loss.
pub fn train_step(
    weights: &mut AutoencoderWeights,
    state: &mut OptimizerState,
    pairs: &[ChunkPair],
    objective: &ObjectiveWeights,
    lr: f64,
    weight_decay: f64,
) -> Result<f64, TrainingError> {
    let grad = backward(pairs, weights, objective)?;
    adamw_step(weights.params_mut(), &grad.grad, state, lr, weight_decay, AdamHyper::default())?;
    Ok(grad.loss.total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
    /// Loss over the training split before the first update.
    pub initial_train_loss: f64,
    pub best_epoch: Option<usize>,
    pub best_checkpoint_path: Option<PathBuf>,
    pub train_models: Vec<String>,
    pub val_models: Vec<String>,
}

impl TrainingHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.train_loss)
    }

    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_weights: AutoencoderWeights,
    /// Weights at the epoch with the lowest validation loss (training loss
    /// when the validation split is empty).
    pub best_weights: AutoencoderWeights,
    pub history: TrainingHistory,
}

/// True when the model id falls in the held-out tenth.
pub fn is_validation_model(model_id: &str) -> bool {
    let digest = Sha256::digest(model_id.as_bytes());
    let head = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    head % 10 == 0
}

/// Mixes a base seed with stream indices (splitmix64 finalizer).
pub fn derive_seed(base: u64, streams: &[u64]) -> u64 {
    let mut x = base;
    for &s in std::iter::once(&0x9e37_79b9_7f4a_7c15).chain(streams) {
        x = x.wrapping_add(s).wrapping_add(0x9e37_79b9_7f4a_7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
    }
    x
}

struct Item {
    chunk: TokenChunk,
    norm: f64,
}

/// Split `indices` into consecutive batches. A trailing batch of one is
/// folded into its predecessor when the contrastive term needs pairs.
fn batches(indices: &[usize], size: usize, needs_pairs: bool) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = indices.chunks(size).map(<[usize]>::to_vec).collect();
    if needs_pairs && out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

fn make_pairs(items: &[Item], batch: &[usize], sigma: f64, seed: u64, stream: u64) -> Vec<ChunkPair> {
    batch
        .iter()
        .map(|&i| {
            let it = &items[i];
            let noised = noise_view(&it.chunk, sigma, derive_seed(seed, &[stream, i as u64]));
            ChunkPair { clean: it.chunk.clone(), noised, norm: it.norm }
        })
        .collect()
}

/// Mean batch loss over `items` with fixed noise; no updates.
fn evaluate(
    items: &[Item],
    w: &AutoencoderWeights,
    cfg: &TrainingConfig,
    stream: u64,
) -> Result<Option<f64>, TrainingError> {
    let objective = cfg.objective();
    let order: Vec<usize> = (0..items.len()).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in batches(&order, cfg.batch_size, cfg.gamma > 0.0) {
        if cfg.gamma > 0.0 && batch.len() < 2 {
            continue;
        }
        let pairs = make_pairs(items, &batch, cfg.sigma_aug, cfg.seed, stream);
        total += batch_loss(&pairs, w, &objective)?.total;
        count += 1;
    }
    Ok((count > 0).then(|| total / count as f64))
}

const EVAL_TRAIN_STREAM: u64 = u64::MAX;
const EVAL_VAL_STREAM: u64 = u64::MAX - 1;

/// Train (or continue training from `init`) on every chunk of `dataset`.
///
/// Models are split 90/10 by a hash of their id. When `checkpoint_dir` is
/// given, the best weights are saved there as `best.safetensors` plus
/// `best.json`, and the history as `history.jsonl`.
pub fn train(
    dataset: &[TokenSequence],
    cfg: &TrainingConfig,
    model_cfg: &AutoencoderConfig,
    init: Option<AutoencoderWeights>,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainingError> {
    cfg.validate()?;
    model_cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    let mut weights = match init {
        Some(w) if w.config() != model_cfg => {
            return Err(TrainingError::InvalidConfig("init weights use a different model config".into()))
        }
        Some(w) => w,
        None => AutoencoderWeights::init(*model_cfg, derive_seed(cfg.seed, &[0]))?,
    };

    let mut train_items = Vec::new();
    let mut val_items = Vec::new();
    let mut train_models = Vec::new();
    let mut val_models = Vec::new();
    for seq in dataset {
        if seq.d_t != model_cfg.d_t {
            return Err(TrainingError::InvalidConfig(format!(
                "sequence {} has d_t {}, model expects {}",
                seq.source_id, seq.d_t, model_cfg.d_t
            )));
        }
        let norm = seq.norm_scale();
        let held_out = is_validation_model(&seq.source_id);
        let (items, models) = if held_out { (&mut val_items, &mut val_models) } else { (&mut train_items, &mut train_models) };
        models.push(seq.source_id.clone());
        for chunk in chunk_sequence(seq, model_cfg.window)? {
            items.push(Item { chunk, norm });
        }
    }
    if train_items.is_empty() {
        train_items.append(&mut val_items);
        train_models.append(&mut val_models);
    }
    if train_items.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    let mut distinct = train_models.clone();
    distinct.sort();
    distinct.dedup();
    if cfg.gamma > 0.0 && (distinct.len() < 2 || train_items.len() < 2) {
        return Err(ModelError::SinglePair.into());
    }

    let objective = cfg.objective();
    let order: Vec<usize> = (0..train_items.len()).collect();
    let steps_per_epoch = batches(&order, cfg.batch_size, cfg.gamma > 0.0).len();
    let schedule = cfg.schedule(steps_per_epoch * cfg.epochs);
    let mut state = OptimizerState::new(weights.len());

    let mut history = TrainingHistory {
        initial_train_loss: evaluate(&train_items, &weights, cfg, EVAL_TRAIN_STREAM)?.unwrap_or(f64::NAN),
        train_models,
        val_models,
        ..TrainingHistory::default()
    };
    let mut best: Option<(f64, usize, AutoencoderWeights)> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order = order.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, epoch as u64])));
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        let epoch_batches = batches(&order, cfg.batch_size, cfg.gamma > 0.0);
        for batch in &epoch_batches {
            lr = schedule.lr(step)?;
            let pairs = make_pairs(&train_items, batch, cfg.sigma_aug, cfg.seed, epoch as u64);
            let loss = train_step(&mut weights, &mut state, &pairs, &objective, lr, cfg.weight_decay)?;
            if !loss.is_finite() {
                return Err(TrainingError::DivergedLoss { epoch, step, value: loss });
            }
            epoch_loss += loss;
            step += 1;
        }
        let train_loss = epoch_loss / epoch_batches.len() as f64;
        let val_loss = evaluate(&val_items, &weights, cfg, EVAL_VAL_STREAM)?;
        if let Some(v) = val_loss.filter(|v| !v.is_finite()) {
            return Err(TrainingError::DivergedLoss { epoch, step, value: v });
        }
        log::debug!("epoch {epoch}: train {train_loss:.6e} val {val_loss:?} lr {lr:.3e}");
        let score = val_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, epoch, weights.clone()));
        }
        history.records.push(EpochRecord { epoch, train_loss, val_loss, lr });
    }

    let (_, best_epoch, best_weights) = best.expect("at least one epoch");
    history.best_epoch = Some(best_epoch);
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| TrainingError::Io(dir.display().to_string(), e))?;
        let stem = dir.join("best");
        best_weights.save(&stem)?;
        history.best_checkpoint_path = Some(stem.with_extension("safetensors"));
        let path = dir.join("history.jsonl");
        let mut file = std::fs::File::create(&path).map_err(|e| TrainingError::Io(path.display().to_string(), e))?;
        file.write_all(history.to_jsonl().as_bytes())
            .map_err(|e| TrainingError::Io(path.display().to_string(), e))?;
    }
    Ok(TrainOutcome { final_weights: weights, best_weights, history })
}
