//! Ensemble pruning and fusion over the logits of pre-trained few-shot models.
//!
//! The crate works purely on recorded logits: a [`logitstore::Pool`] aligns
//! per-model logit files, [`diversity`] scores candidate ensembles by focal
//! error diversity, [`pruner`] searches the candidate space exhaustively or
//! with a genetic algorithm, [`consensus`] and [`fusion`] turn member
//! predictions into one ensemble prediction, and [`synth`] produces planted
//! pools used as test oracles.

pub mod consensus;
pub mod diversity;
pub mod error;
pub mod fusion;
pub mod logitstore;
pub mod mask;
pub mod pruner;
pub mod synth;

pub use error::{Error, Result};
pub use logitstore::{CorrectnessMatrix, LogitMatrix, LogitRecord, Pool, PoolManifest};
pub use mask::EnsembleMask;
