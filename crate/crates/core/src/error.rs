use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{}:{line}: {message}", .path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("model {model_id} is misaligned at episode {episode_id}")]
    MisalignedEpisodes { model_id: String, episode_id: u64 },

    #[error("inconsistent number of ways in {context}: expected {expected}, found {found}")]
    InconsistentK {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("unknown split `{0}`")]
    UnknownSplit(String),

    #[error("invalid logit record: {0}")]
    InvalidRecord(String),

    #[error("invalid ensemble mask: {0}")]
    InvalidMask(String),

    #[error("focal model {0} is not a member of the ensemble")]
    FocalNotInMask(usize),

    #[error("focal model {0} never fails on the split, its focal negative correlation is undefined")]
    FocalNeverFails(usize),

    #[error("pruning weights must be non-negative and sum to 1 (got w1={w1}, w2={w2})")]
    WeightsNotConvex { w1: f64, w2: f64 },

    #[error("search produced no ranked ensembles")]
    EmptyResult,

    #[error("victim model `{0}` is not in the pool")]
    VictimNotInPool(String),

    #[error("probability row does not sum to 1 (sum = {0})")]
    RowNotNormalized(f64),

    #[error("requested {requested} episodes but only {available} are available")]
    NotEnoughEpisodes { requested: usize, available: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite training loss at epoch {epoch} (step {step})")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("stream batch {batch} has {available} episodes, {required} required")]
    BatchTooSmall {
        batch: usize,
        required: usize,
        available: usize,
    },

    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
