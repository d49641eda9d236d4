//! Optimisation loop, cross-validation and checkpoints.

mod checkpoint;
mod cv;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use cv::{compare, cross_validate, fold_seed, CompareRow, CvData, CvReport, CvRun};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clinical::ClinicalError;
use crate::data::{DataError, FeatureSequence};
use crate::layers::{LayerError, Model, ModelConfig, Variant};
use crate::metrics::{auc, MetricsError};
use crate::tensor::{sgd_step, Adam, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("epoch {epoch} is outside 0..{epochs}")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Step {
        epoch: usize,
        batch: usize,
        #[source]
        source: LayerError,
    },
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Clinical(#[from] ClinicalError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// `p ← p − lr·grad`.
    Sgd,
    Adam,
}

/// Hyperparameters of one training run and of the cross-validation around
/// it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub window: usize,
    pub hidden: usize,
    pub attn_dim: usize,
    pub num_layers: usize,
    pub folds: usize,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::LocalJoint,
            epochs: 50,
            batch_size: 2,
            lr_start: 1e-3,
            lr_end: 1e-5,
            optimizer: Optimizer::Adam,
            seed: 0,
            window: 6,
            hidden: 32,
            attn_dim: 8,
            num_layers: 2,
            folds: 5,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return bad("learning rates must satisfy lr_start >= lr_end > 0");
        }
        if self.folds < 2 {
            return bad("folds must be at least 2");
        }
        if !(0.0..1.0).contains(&self.val_fraction) || self.val_fraction == 0.0 {
            return bad("val_fraction must lie in (0, 1)");
        }
        if self.variant.is_neural() {
            self.model_config(1).validate()?;
        }
        Ok(())
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            input_dim,
            hidden: self.hidden,
            num_layers: self.num_layers,
            window: self.window,
            attn_dim: self.attn_dim,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| TrainError::Config(e.to_string()))
    }
}

/// Geometric decay from `lr_start` at epoch 0 to `lr_end` at the last
/// epoch. Both endpoints are returned exactly.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(TrainError::EpochOutOfRange {
            epoch,
            epochs: cfg.epochs,
        });
    }
    if epoch == 0 {
        return Ok(cfg.lr_start);
    }
    if epoch == cfg.epochs - 1 {
        return Ok(cfg.lr_end);
    }
    let frac = epoch as f64 / (cfg.epochs - 1) as f64;
    Ok(cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(frac))
}

/// Trained parameters plus what is needed to rebuild and audit them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub epoch: usize,
    pub val_auc: f64,
    pub feature_names: Vec<String>,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, cfg: &TrainConfig, epoch: usize, val_auc: f64, feature_names: Vec<String>) -> Self {
        Self {
            train_config: cfg.clone(),
            model_config: model.config,
            epoch,
            val_auc,
            feature_names,
            params: model
                .named_params()
                .into_iter()
                .map(|(n, t)| {
                    let mut t = t.clone();
                    t.zero_grad();
                    (n, t)
                })
                .collect(),
        }
    }

    pub fn model(&self) -> Result<Model> {
        Ok(Model::from_named(self.model_config, self.params.clone())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-sample cross-entropy over the epoch.
    pub train_loss: f64,
    pub val_auc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
}

/// Logits for each sequence; higher means higher predicted risk.
pub fn score(model: &Model, seqs: &[FeatureSequence]) -> Result<Vec<f64>> {
    seqs.iter().map(|s| Ok(model.logit(s)?)).collect()
}

pub fn evaluate_auc(model: &Model, seqs: &[FeatureSequence]) -> Result<f64> {
    let scores = score(model, seqs)?;
    let labels: Vec<bool> = seqs.iter().map(|s| s.label).collect();
    Ok(auc(&scores, &labels)?)
}

fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Trains one model with per-sample gradient accumulation over batches and
/// one optimizer step per batch, keeping the epoch with the best validation AUC
/// (the earliest on ties).
pub fn train_one(train: &[FeatureSequence], val: &[FeatureSequence], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !cfg.variant.is_neural() {
        return Err(TrainError::Config("the clinical baseline is not trained".into()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Config("training and validation sets must be nonempty".into()));
    }
    let names = train[0].feature_names.clone();
    if train.iter().chain(val).any(|s| s.feature_names != names) {
        return Err(TrainError::Config("all sequences must share one feature layout".into()));
    }
    let val_labels: Vec<bool> = val.iter().map(|s| s.label).collect();
    if val_labels.iter().all(|l| *l) || val_labels.iter().all(|l| !*l) {
        return Err(TrainError::Config("validation set needs both classes".into()));
    }

    let mut model = Model::init(cfg.model_config(names.len()), cfg.seed)?;
    let mut rng = shuffle_rng(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut adam = Adam::default();
    let mut best: Option<Checkpoint> = None;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg)?;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            for &i in idx {
                let loss = model
                    .accumulate_loss_grad(&train[i])
                    .map_err(|source| TrainError::Step { epoch, batch, source })?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch, batch });
                }
                total += loss;
            }
            match cfg.optimizer {
                Optimizer::Sgd => sgd_step(&mut model.params_mut(), lr)?,
                Optimizer::Adam => adam.step(&mut model.params_mut(), lr)?,
            }
        }
        let val_auc = evaluate_auc(&model, val)?;
        history.push(EpochLog {
            epoch,
            lr,
            train_loss: total / train.len() as f64,
            val_auc,
        });
        if best.as_ref().is_none_or(|b| val_auc > b.val_auc) {
            best = Some(Checkpoint::from_model(&model, cfg, epoch, val_auc, names.clone()));
        }
    }
    Ok(TrainOutcome {
        checkpoint: best.expect("at least one epoch"),
        history,
    })
}
