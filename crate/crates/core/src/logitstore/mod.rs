//! Logit data model: per-model, per-split logit matrices aligned into a pool.

mod io;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{ingest, read_logit_csv, read_manifest, write_logit_csv, write_pool};

pub const TRAIN: &str = "train";
pub const VAL: &str = "val";
pub const NOVEL: &str = "novel";
pub const TRAIN_ATTACKED: &str = "train_attacked";

/// One episode's logits from one base model.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitRecord {
    pub episode_id: u64,
    /// Position of the query's class among the K support classes.
    pub y_true: usize,
    pub logits: Vec<f64>,
}

/// All episodes of one split for one model, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    pub model_id: String,
    pub split: String,
    k: usize,
    shots: usize,
    episode_ids: Vec<u64>,
    labels: Vec<usize>,
    values: Vec<f64>,
}

impl LogitMatrix {
    pub fn from_records(
        model_id: impl Into<String>,
        split: impl Into<String>,
        k: usize,
        shots: usize,
        records: impl IntoIterator<Item = LogitRecord>,
    ) -> Result<Self> {
        let mut matrix = Self {
            model_id: model_id.into(),
            split: split.into(),
            k,
            shots,
            episode_ids: Vec::new(),
            labels: Vec::new(),
            values: Vec::new(),
        };
        if k < 2 {
            return Err(Error::InvalidRecord(format!("K must be at least 2, got {k}")));
        }
        for record in records {
            matrix.push(record)?;
        }
        Ok(matrix)
    }

    pub(crate) fn push(&mut self, record: LogitRecord) -> Result<()> {
        if record.logits.len() != self.k {
            return Err(Error::InconsistentK {
                context: format!("model {} split {}", self.model_id, self.split),
                expected: self.k,
                found: record.logits.len(),
            });
        }
        if record.y_true >= self.k {
            return Err(Error::InvalidRecord(format!(
                "episode {}: y_true {} outside [0, {})",
                record.episode_id, record.y_true, self.k
            )));
        }
        if let Some(bad) = record.logits.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidRecord(format!(
                "episode {}: non-finite logit {bad}",
                record.episode_id
            )));
        }
        if let Some(&last) = self.episode_ids.last() {
            if record.episode_id <= last {
                return Err(Error::InvalidRecord(format!(
                    "episode ids must be strictly increasing ({} after {last})",
                    record.episode_id
                )));
            }
        }
        self.episode_ids.push(record.episode_id);
        self.labels.push(record.y_true);
        self.values.extend_from_slice(&record.logits);
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn len(&self) -> usize {
        self.episode_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episode_ids.is_empty()
    }

    pub fn episode_ids(&self) -> &[u64] {
        &self.episode_ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, episode: usize) -> &[f64] {
        &self.values[episode * self.k..(episode + 1) * self.k]
    }

    pub fn record(&self, episode: usize) -> LogitRecord {
        LogitRecord {
            episode_id: self.episode_ids[episode],
            y_true: self.labels[episode],
            logits: self.row(episode).to_vec(),
        }
    }

    pub fn records(&self) -> impl Iterator<Item = LogitRecord> + '_ {
        (0..self.len()).map(|e| self.record(e))
    }

    /// Predicted class per episode (lowest index wins ties).
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.len()).map(|e| argmax(self.row(e))).collect()
    }

    /// Contiguous sub-range of episodes, keeping ids.
    pub fn slice(&self, range: std::ops::Range<usize>) -> LogitMatrix {
        LogitMatrix {
            model_id: self.model_id.clone(),
            split: self.split.clone(),
            k: self.k,
            shots: self.shots,
            episode_ids: self.episode_ids[range.clone()].to_vec(),
            labels: self.labels[range.clone()].to_vec(),
            values: self.values[range.start * self.k..range.end * self.k].to_vec(),
        }
    }

    /// Row-wise softmax of every episode.
    pub fn apply_softmax(&self) -> LogitMatrix {
        let mut out = self.clone();
        for row in out.values.chunks_mut(self.k) {
            softmax_in_place(row);
        }
        out
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub model_id: String,
    #[serde(default)]
    pub backbone: String,
    #[serde(default)]
    pub distance: String,
    /// Logit file per split, relative to the manifest's directory.
    pub files: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub pool_name: String,
    pub k: usize,
    #[serde(default = "default_shots")]
    pub shots: usize,
    pub models: Vec<ModelEntry>,
    #[serde(default)]
    pub episode_counts: BTreeMap<String, usize>,
}

fn default_shots() -> usize {
    1
}

/// Boolean N x E matrix: `rows[i][e]` is true when model `i` is correct on episode `e`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectnessMatrix {
    pub split: String,
    pub rows: Vec<Vec<bool>>,
}

impl CorrectnessMatrix {
    pub fn n_models(&self) -> usize {
        self.rows.len()
    }

    pub fn episodes(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn get(&self, model: usize, episode: usize) -> bool {
        self.rows[model][episode]
    }

    /// Fraction of correct episodes per model.
    pub fn accuracies(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().filter(|&&c| c).count() as f64 / r.len().max(1) as f64)
            .collect()
    }
}

/// A validated set of aligned logit matrices for N models.
#[derive(Debug, Clone)]
pub struct Pool {
    manifest: PoolManifest,
    splits: BTreeMap<String, Vec<LogitMatrix>>,
}

impl Pool {
    /// `splits[tag][i]` must belong to `manifest.models[i]`.
    pub fn new(mut manifest: PoolManifest, splits: BTreeMap<String, Vec<LogitMatrix>>) -> Result<Self> {
        let n = manifest.models.len();
        if n < 2 {
            return Err(Error::InvalidManifest(format!(
                "a pool needs at least 2 models, found {n}"
            )));
        }
        if n > crate::mask::MAX_POOL {
            return Err(Error::InvalidManifest(format!(
                "pools are limited to {} models",
                crate::mask::MAX_POOL
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for model in &manifest.models {
            if !seen.insert(model.model_id.as_str()) {
                return Err(Error::InvalidManifest(format!(
                    "duplicate model id `{}`",
                    model.model_id
                )));
            }
        }
        for (tag, matrices) in &splits {
            if matrices.len() != n {
                return Err(Error::InvalidManifest(format!(
                    "split {tag} has {} models, manifest lists {n}",
                    matrices.len()
                )));
            }
            for (entry, matrix) in manifest.models.iter().zip(matrices) {
                if matrix.model_id != entry.model_id {
                    return Err(Error::InvalidManifest(format!(
                        "split {tag}: expected model {}, found {}",
                        entry.model_id, matrix.model_id
                    )));
                }
                if matrix.k() != manifest.k {
                    return Err(Error::InconsistentK {
                        context: format!("model {} split {tag}", matrix.model_id),
                        expected: manifest.k,
                        found: matrix.k(),
                    });
                }
            }
            check_alignment(matrices)?;
            manifest.episode_counts.insert(tag.clone(), matrices[0].len());
        }
        Ok(Self { manifest, splits })
    }

    pub fn manifest(&self) -> &PoolManifest {
        &self.manifest
    }

    pub fn name(&self) -> &str {
        &self.manifest.pool_name
    }

    pub fn n_models(&self) -> usize {
        self.manifest.models.len()
    }

    pub fn k(&self) -> usize {
        self.manifest.k
    }

    pub fn model_ids(&self) -> Vec<&str> {
        self.manifest.models.iter().map(|m| m.model_id.as_str()).collect()
    }

    pub fn model_index(&self, model_id: &str) -> Option<usize> {
        self.manifest.models.iter().position(|m| m.model_id == model_id)
    }

    pub fn split_tags(&self) -> impl Iterator<Item = &str> {
        self.splits.keys().map(String::as_str)
    }

    pub fn has_split(&self, split: &str) -> bool {
        self.splits.contains_key(split)
    }

    pub fn split(&self, split: &str) -> Result<&[LogitMatrix]> {
        self.splits
            .get(split)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownSplit(split.to_string()))
    }

    pub fn episodes(&self, split: &str) -> Result<usize> {
        Ok(self.split(split)?[0].len())
    }

    /// Ground-truth labels of a split (shared by all models after alignment).
    pub fn labels(&self, split: &str) -> Result<&[usize]> {
        Ok(self.split(split)?[0].labels())
    }

    pub fn correctness(&self, split: &str) -> Result<CorrectnessMatrix> {
        let matrices = self.split(split)?;
        let rows = matrices
            .iter()
            .map(|m| (0..m.len()).map(|e| argmax(m.row(e)) == m.labels()[e]).collect())
            .collect();
        Ok(CorrectnessMatrix {
            split: split.to_string(),
            rows,
        })
    }

    /// Predicted class per model per episode.
    pub fn predictions(&self, split: &str) -> Result<Vec<Vec<usize>>> {
        Ok(self.split(split)?.iter().map(LogitMatrix::predictions).collect())
    }

    /// A new pool holding only the episode range of one split, re-tagged as `as_split`.
    pub fn slice_split(&self, split: &str, range: std::ops::Range<usize>, as_split: &str) -> Result<Pool> {
        let matrices = self.split(split)?;
        if range.end > matrices[0].len() {
            return Err(Error::NotEnoughEpisodes {
                requested: range.end,
                available: matrices[0].len(),
            });
        }
        let sliced = matrices
            .iter()
            .map(|m| {
                let mut s = m.slice(range.clone());
                s.split = as_split.to_string();
                s
            })
            .collect();
        let mut manifest = self.manifest.clone();
        manifest.episode_counts.clear();
        Pool::new(manifest, BTreeMap::from([(as_split.to_string(), sliced)]))
    }
}

fn check_alignment(matrices: &[LogitMatrix]) -> Result<()> {
    let reference = &matrices[0];
    for m in &matrices[1..] {
        let ids = m.episode_ids();
        let ref_ids = reference.episode_ids();
        for e in 0..ids.len().max(ref_ids.len()) {
            match (ref_ids.get(e), ids.get(e)) {
                (Some(a), Some(b)) if a == b => {
                    if reference.labels()[e] != m.labels()[e] {
                        return Err(Error::MisalignedEpisodes {
                            model_id: m.model_id.clone(),
                            episode_id: *a,
                        });
                    }
                }
                (Some(a), Some(b)) => {
                    // The first id where the sequences diverge is the one
                    // missing from (or extra in) this model.
                    return Err(Error::MisalignedEpisodes {
                        model_id: m.model_id.clone(),
                        episode_id: *a.min(b),
                    });
                }
                (Some(a), None) | (None, Some(a)) => {
                    return Err(Error::MisalignedEpisodes {
                        model_id: m.model_id.clone(),
                        episode_id: *a,
                    });
                }
                (None, None) => unreachable!(),
            }
        }
    }
    Ok(())
}
