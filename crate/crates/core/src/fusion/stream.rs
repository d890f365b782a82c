//! Streaming adaptation: fine-tune per batch, report the held-out slice.

use serde::{Deserialize, Serialize};

use super::train::{build_dataset, train_on, TrainConfig};
use super::{FusionCombiner, FusionParams};
use crate::consensus::{episode_correctness, summarize, EvalSummary};
use crate::error::{Error, Result};
use crate::logitstore::Pool;
use crate::mask::EnsembleMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub train_episodes: usize,
    pub val_episodes: usize,
    pub test_episodes: usize,
    /// Re-initialize before every batch instead of fine-tuning.
    pub cold_start: bool,
    /// Split tag holding each batch's episodes.
    pub split: String,
    pub train: TrainConfig,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            train_episodes: 1500,
            val_episodes: 300,
            test_episodes: 200,
            cold_start: false,
            split: "stream".into(),
            // Per-batch fine-tunes start close to a good solution; a shorter
            // schedule keeps ten batches tractable on one core.
            train: TrainConfig {
                max_epochs: 100,
                patience: Some(10),
                ..TrainConfig::default()
            },
        }
    }
}

impl StreamConfig {
    fn required(&self) -> usize {
        self.train_episodes + self.val_episodes + self.test_episodes
    }
}

/// Per-batch outcome of the stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamBatch {
    pub batch: usize,
    pub summary: EvalSummary,
    /// Test-slice accuracy (percent) of the best single member.
    pub best_member_accuracy: f64,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamTrace {
    pub mask: EnsembleMask,
    pub batches: Vec<StreamBatch>,
}

impl StreamTrace {
    pub fn summaries(&self) -> Vec<EvalSummary> {
        self.batches.iter().map(|b| b.summary.clone()).collect()
    }
}

/// Runs the stream. `initial` is used for the first batch (and, in warm
/// mode, carried forward); when absent a seeded network is initialized.
pub fn stream_adapt(batches: &[Pool], mask: &EnsembleMask, config: &StreamConfig, initial: Option<FusionParams>) -> Result<StreamTrace> {
    config.train.validate()?;
    let required = config.required();
    let (tr, va) = (config.train_episodes, config.val_episodes);
    let mut current = initial;
    let mut out = Vec::with_capacity(batches.len());
    for (b, pool) in batches.iter().enumerate() {
        let available = pool.episodes(&config.split)?;
        if available < required {
            return Err(Error::BatchTooSmall { batch: b, required, available });
        }
        let norm = config.train.normalization;
        let data = build_dataset(pool, mask, &[config.split.as_str()], norm)?;
        let fresh = || FusionParams::init(*mask, pool.k(), &config.train.hidden, norm, config.train.seed);
        let start = match current.take() {
            Some(p) if !(config.cold_start && b > 0) => p,
            _ => fresh(),
        };
        let outcome = train_on(start, &data.slice(0..tr), &data.slice(tr..tr + va), &config.train)?;
        let test = pool.slice_split(&config.split, tr + va..required, &config.split)?;
        let correct = episode_correctness(&FusionCombiner { params: &outcome.params }, &test, mask, &config.split, config.test_episodes)?;
        let correctness = test.correctness(&config.split)?;
        let best_member = mask
            .members()
            .iter()
            .map(|&i| correctness.accuracies()[i])
            .fold(0.0, f64::max);
        out.push(StreamBatch {
            batch: b,
            summary: summarize("fusion", config.split.clone(), &correct),
            best_member_accuracy: 100.0 * best_member,
            best_epoch: outcome.params.metadata.best_epoch,
        });
        current = Some(outcome.params);
    }
    Ok(StreamTrace { mask: *mask, batches: out })
}
