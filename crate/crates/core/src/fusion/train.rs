//! Mini-batch training with best-validation snapshotting.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{self, Adam};
use super::{FusionParams, InputNormalization};
use crate::error::{Error, Result};
use crate::logitstore::{Pool, TRAIN, TRAIN_ATTACKED, VAL};
use crate::mask::EnsembleMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
    /// Full-batch gradient descent; used to verify monotone loss decrease.
    GradientDescent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    pub seed: u64,
    pub normalization: InputNormalization,
    pub optimizer: Optimizer,
    pub train_splits: Vec<String>,
    pub val_split: String,
    /// Append `train_attacked` to the training rows when the pool has it.
    pub include_attacked: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![100, 100],
            learning_rate: 1e-3,
            max_epochs: 300,
            batch_size: 128,
            patience: None,
            seed: 7,
            normalization: InputNormalization::Softmax,
            optimizer: Optimizer::Adam,
            train_splits: vec![TRAIN.into()],
            val_split: VAL.into(),
            include_attacked: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidConfig("max_epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidConfig("hidden layers must be non-empty".into()));
        }
        if self.train_splits.is_empty() {
            return Err(Error::InvalidConfig("no training split".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean mini-batch loss over the epoch (loss before each step).
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: FusionParams,
    pub history: Vec<EpochStats>,
}

/// Normalized, concatenated member logits with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionDataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl FusionDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `range` of this dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> FusionDataset {
        FusionDataset {
            inputs: self.inputs.slice(ndarray::s![range.clone(), ..]).to_owned(),
            labels: self.labels[range].to_vec(),
        }
    }
}

/// Stacks the given splits' rows (in order) into one dataset.
pub fn build_dataset(pool: &Pool, mask: &EnsembleMask, splits: &[&str], normalization: InputNormalization) -> Result<FusionDataset> {
    if mask.pool_size() != pool.n_models() {
        return Err(Error::InvalidMask(format!("mask {mask} does not select from a pool of {}", pool.n_models())));
    }
    let members = mask.members();
    let k = pool.k();
    let width = members.len() * k;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for split in splits {
        let matrices = pool.split(split)?;
        for e in 0..matrices[0].len() {
            for &i in &members {
                let start = values.len();
                values.extend_from_slice(matrices[i].row(e));
                normalization.apply(&mut values[start..]);
            }
        }
        labels.extend_from_slice(matrices[0].labels());
    }
    let inputs = Array2::from_shape_vec((labels.len(), width), values).expect("row width is m*K");
    Ok(FusionDataset { inputs, labels })
}

/// Trains a freshly initialized network on the pool's training splits.
pub fn train(pool: &Pool, mask: &EnsembleMask, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let mut splits: Vec<&str> = config.train_splits.iter().map(String::as_str).collect();
    if config.include_attacked && pool.has_split(TRAIN_ATTACKED) && !splits.contains(&TRAIN_ATTACKED) {
        splits.push(TRAIN_ATTACKED);
    }
    let train_set = build_dataset(pool, mask, &splits, config.normalization)?;
    let val_set = build_dataset(pool, mask, &[config.val_split.as_str()], config.normalization)?;
    let mut initial = FusionParams::init(*mask, pool.k(), &config.hidden, config.normalization, config.seed);
    let ids = pool.model_ids();
    initial.metadata.member_ids = mask.members().iter().map(|&i| ids[i].to_string()).collect();
    train_on(initial, &train_set, &val_set, config)
}

/// Continues training `initial` and returns the best-validation snapshot.
/// The starting parameters count as epoch 0.
pub fn train_on(initial: FusionParams, train_set: &FusionDataset, val_set: &FusionDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    initial.validate()?;
    let width = initial.metadata.m * initial.metadata.k;
    if train_set.inputs.ncols() != width || val_set.inputs.ncols() != width {
        return Err(Error::ShapeMismatch(format!("dataset width differs from network input {width}")));
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidConfig("training and validation sets must be non-empty".into()));
    }
    if let Some(&y) = train_set.labels.iter().chain(&val_set.labels).find(|&&y| y >= initial.metadata.k) {
        return Err(Error::ShapeMismatch(format!("label {y} outside K={}", initial.metadata.k)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut params = initial;
    let mut adam = Adam::new(&params.layers, config.learning_rate);
    let batch_size = match config.optimizer {
        Optimizer::Adam => config.batch_size,
        Optimizer::GradientDescent => train_set.len(),
    };

    let mut best_acc = params.accuracy(val_set.inputs.view(), &val_set.labels);
    let mut best_epoch = 0;
    let mut best_layers = params.layers.clone();
    let mut history = Vec::with_capacity(config.max_epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;

    for epoch in 1..=config.max_epochs {
        if config.optimizer == Optimizer::Adam {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch_size) {
            step += 1;
            let x = train_set.inputs.select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let (loss, grads) = network::loss_and_gradients(&params.layers, x.view(), &y);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            loss_sum += loss * chunk.len() as f64;
            match config.optimizer {
                Optimizer::Adam => adam.update(&mut params.layers, &grads),
                Optimizer::GradientDescent => network::sgd_update(&mut params.layers, &grads, config.learning_rate),
            }
        }
        let val_accuracy = params.accuracy(val_set.inputs.view(), &val_set.labels);
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_accuracy,
        });
        if val_accuracy > best_acc {
            best_acc = val_accuracy;
            best_epoch = epoch;
            best_layers.clone_from(&params.layers);
        } else if config.patience.is_some_and(|p| epoch - best_epoch >= p) {
            break;
        }
    }

    params.layers = best_layers;
    params.metadata.best_val_accuracy = Some(best_acc);
    params.metadata.best_epoch = Some(best_epoch);
    params.metadata.epochs_trained = history.len();
    Ok(TrainOutcome { params, history })
}
