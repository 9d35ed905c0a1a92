//! Supervised fine-tuning with Adam and cross-entropy, checkpointing every epoch.

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ovafuse_core::ingest::{holdout_split, DatasetManifest, DEFAULT_WORKERS};
use ovafuse_core::PreprocessConfig;

use crate::backbone::{BackboneSpec, Mode, ModelHandle};
use crate::checkpoint::save_checkpoint;
use crate::data::{DataError, ImageSet};
use crate::ModelError;

pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const TRAIN_REPORT: &str = "train_report.json";

pub const MIN_LEARNING_RATE: f64 = 1e-4;
pub const MAX_LEARNING_RATE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// `None` uses the family default (32 for CNNs, 16 for the transformer).
    pub batch_size: Option<usize>,
    pub epochs: usize,
    /// Seed of the shuffling stream.
    pub seed: u64,
    pub mixed_precision: bool,
    pub checkpoint_dir: PathBuf,
    /// Fraction of train records withheld from fitting (reserved for ensemble weights).
    pub holdout_fraction: f64,
    pub holdout_seed: u64,
    pub workers: usize,
    pub preprocess: PreprocessConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: MIN_LEARNING_RATE,
            batch_size: None,
            epochs: 100,
            seed: 0,
            mixed_precision: false,
            checkpoint_dir: PathBuf::from("checkpoints"),
            holdout_fraction: 0.1,
            holdout_seed: 0,
            workers: DEFAULT_WORKERS,
            preprocess: PreprocessConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(MIN_LEARNING_RATE..=MAX_LEARNING_RATE).contains(&self.learning_rate) {
            return bad(format!(
                "learning_rate {} outside [{MIN_LEARNING_RATE}, {MAX_LEARNING_RATE}]",
                self.learning_rate
            ));
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad(format!("holdout_fraction {} outside [0, 1)", self.holdout_fraction));
        }
        if self.mixed_precision {
            return Err(TrainError::MixedPrecisionUnsupported);
        }
        self.preprocess
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))
    }

    pub fn batch_size_for(&self, spec: &BackboneSpec) -> usize {
        self.batch_size.unwrap_or_else(|| spec.kind.default_batch_size())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model_id: String,
    pub spec: BackboneSpec,
    /// Mean cross-entropy over each epoch's batches, weighted by batch size.
    pub per_epoch_loss: Vec<f64>,
    pub final_checkpoint: PathBuf,
    /// Checkpoint of the epoch with the lowest training loss.
    pub best_checkpoint: PathBuf,
    pub best_epoch: Option<usize>,
    pub train_images: usize,
    pub seed: u64,
    /// Seconds.
    pub wall_time: f64,
}

impl TrainReport {
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| TrainError::Report(e.to_string()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("mixed precision is not available on the CPU backend")]
    MixedPrecisionUnsupported,
    #[error("the train split has no valid records")]
    EmptyTrainSplit,
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("train report: {0}")]
    Report(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<candle_core::Error> for TrainError {
    fn from(e: candle_core::Error) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

/// Trains on the train split minus its holdout part.
pub fn train(model: &mut ModelHandle, manifest: &DatasetManifest, config: &TrainConfig) -> Result<TrainReport, TrainError> {
    config.validate()?;
    let split = holdout_split(manifest, config.holdout_fraction, config.holdout_seed);
    if split.fit.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let data = ImageSet::load(manifest, &split.fit, &config.preprocess, config.workers)?;
    train_on(model, &data, config)
}

/// Trains on an already loaded image set.
///
/// Runs `config.epochs` passes over shuffled minibatches. After each epoch the
/// parameters are written to `last.safetensors`, and to `best.safetensors` when
/// the epoch loss is the lowest so far. The model is left in eval mode.
pub fn train_on(model: &mut ModelHandle, data: &ImageSet, config: &TrainConfig) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let started = Instant::now();
    let dir = &config.checkpoint_dir;
    std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
        path: dir.clone(),
        source,
    })?;
    let last = dir.join(LAST_CHECKPOINT);
    let best = dir.join(BEST_CHECKPOINT);

    let batch_size = config.batch_size_for(&model.spec);
    let labels = data.label_tensor()?;
    let mut optimizer = AdamW::new(
        model.params.trainable_vars(),
        ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<u32> = (0..data.len() as u32).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    let mut best_epoch = None;

    model.set_mode(Mode::Train);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch, chunk) in order.chunks(batch_size).enumerate() {
            let idx = Tensor::from_slice(chunk, chunk.len(), &Device::Cpu)?;
            let x = data.images.index_select(&idx, 0)?;
            let y = labels.index_select(&idx, 0)?;
            let logits = model.forward_tensor(&x)?;
            let loss = candle_nn::loss::cross_entropy(&logits, &y)?;
            let value = loss.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                model.set_mode(Mode::Eval);
                return Err(TrainError::NonFiniteLoss { epoch, batch });
            }
            optimizer.backward_step(&loss)?;
            total += value * chunk.len() as f64;
        }
        let epoch_loss = total / data.len() as f64;
        log::info!("{} epoch {epoch}/{}: loss {epoch_loss:.5}", model.id(), config.epochs);
        model.epoch += 1;
        save_checkpoint(model, &last)?;
        if losses.iter().all(|&l| epoch_loss < l) {
            save_checkpoint(model, &best)?;
            best_epoch = Some(epoch);
        }
        losses.push(epoch_loss);
    }
    model.set_mode(Mode::Eval);
    if config.epochs == 0 {
        save_checkpoint(model, &last)?;
    }

    let report = TrainReport {
        model_id: model.id().to_string(),
        spec: model.spec,
        per_epoch_loss: losses,
        final_checkpoint: last.clone(),
        best_checkpoint: if best_epoch.is_some() { best } else { last },
        best_epoch,
        train_images: data.len(),
        seed: config.seed,
        wall_time: started.elapsed().as_secs_f64(),
    };
    let path = dir.join(TRAIN_REPORT);
    let json = serde_json::to_string_pretty(&report).map_err(|e| TrainError::Report(e.to_string()))?;
    std::fs::write(&path, json).map_err(|source| TrainError::Io { path, source })?;
    Ok(report)
}
