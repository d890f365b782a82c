//! Learn-to-combine fusion network.
//!
//! A feed-forward network reads the concatenated (per-member normalized)
//! logits of the `m` ensemble members and outputs a K-way softmax:
//!
//! ```text
//! y = softmax(W_L(... sigmoid(W_1 [z^1, ..., z^m] + b_1) ...) + b_L)
//! ```
//!
//! Default shape is `[m*K, 100, 100, K]`.

mod network;
mod stream;
mod train;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::{evaluate, Combiner, EvalSummary};
use crate::error::{Error, Result};
use crate::logitstore::{argmax, softmax_in_place, Pool};
use crate::mask::EnsembleMask;

pub use stream::{stream_adapt, StreamBatch, StreamConfig, StreamTrace};
pub use train::{build_dataset, train, train_on, EpochStats, FusionDataset, Optimizer, TrainConfig, TrainOutcome};

/// How member logits are normalized before concatenation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputNormalization {
    #[default]
    Softmax,
    Raw,
}

impl InputNormalization {
    fn apply(self, row: &mut [f64]) {
        if self == InputNormalization::Softmax {
            softmax_in_place(row);
        }
    }
}

/// One fully connected layer, `out = W x + b` with `W` of shape (out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionMetadata {
    pub mask: EnsembleMask,
    #[serde(default)]
    pub member_ids: Vec<String>,
    pub k: usize,
    pub m: usize,
    pub normalization: InputNormalization,
    pub seed: u64,
    pub best_val_accuracy: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_trained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsRepr", into = "ParamsRepr")]
pub struct FusionParams {
    pub layers: Vec<DenseLayer>,
    pub metadata: FusionMetadata,
}

/// On-disk layout: layer dims plus row-major weight arrays.
#[derive(Serialize, Deserialize)]
struct ParamsRepr {
    layer_dims: Vec<usize>,
    activation: String,
    layers: Vec<LayerRepr>,
    metadata: FusionMetadata,
}

#[derive(Serialize, Deserialize)]
struct LayerRepr {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl From<FusionParams> for ParamsRepr {
    fn from(p: FusionParams) -> Self {
        Self {
            layer_dims: p.layer_dims(),
            activation: "sigmoid".into(),
            layers: p
                .layers
                .into_iter()
                .map(|l| LayerRepr {
                    rows: l.out_dim(),
                    cols: l.in_dim(),
                    weights: l.weights.iter().copied().collect(),
                    biases: l.biases.to_vec(),
                })
                .collect(),
            metadata: p.metadata,
        }
    }
}

impl TryFrom<ParamsRepr> for FusionParams {
    type Error = Error;

    fn try_from(r: ParamsRepr) -> Result<Self> {
        if r.activation != "sigmoid" {
            return Err(Error::ShapeMismatch(format!("unsupported activation {}", r.activation)));
        }
        let layers = r
            .layers
            .into_iter()
            .map(|l| {
                let weights = Array2::from_shape_vec((l.rows, l.cols), l.weights)
                    .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
                if l.biases.len() != l.rows {
                    return Err(Error::ShapeMismatch("bias length differs from layer rows".into()));
                }
                Ok(DenseLayer {
                    weights,
                    biases: Array1::from(l.biases),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = FusionParams {
            layers,
            metadata: r.metadata,
        };
        if params.layer_dims() != r.layer_dims {
            return Err(Error::ShapeMismatch("layer_dims disagree with the weight arrays".into()));
        }
        params.validate()?;
        Ok(params)
    }
}

impl FusionParams {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization.
    pub fn init(mask: EnsembleMask, k: usize, hidden: &[usize], normalization: InputNormalization, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = layer_dims(mask.size(), k, hidden);
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                DenseLayer {
                    weights: Array2::from_shape_simple_fn((w[1], w[0]), || rng.random_range(-bound..=bound)),
                    biases: Array1::from_shape_simple_fn(w[1], || rng.random_range(-bound..=bound)),
                }
            })
            .collect();
        Self {
            layers,
            metadata: FusionMetadata::new(mask, k, normalization, seed),
        }
    }

    /// All weights and biases zero: predicts the uniform distribution.
    pub fn zeros(mask: EnsembleMask, k: usize, hidden: &[usize], normalization: InputNormalization) -> Self {
        let dims = layer_dims(mask.size(), k, hidden);
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer {
                weights: Array2::zeros((w[1], w[0])),
                biases: Array1::zeros(w[1]),
            })
            .collect();
        Self {
            layers,
            metadata: FusionMetadata::new(mask, k, normalization, 0),
        }
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers.first().map_or(0, DenseLayer::in_dim)];
        dims.extend(self.layers.iter().map(DenseLayer::out_dim));
        dims
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let md = &self.metadata;
        let dims = self.layer_dims();
        if self.layers.is_empty() || dims[0] != md.m * md.k || *dims.last().unwrap() != md.k {
            return Err(Error::ShapeMismatch(format!(
                "layer dims {dims:?} do not fit m={} K={}",
                md.m, md.k
            )));
        }
        if md.mask.size() != md.m {
            return Err(Error::ShapeMismatch(format!("mask {} does not have m={} members", md.mask, md.m)));
        }
        for w in self.layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::ShapeMismatch("consecutive layers do not chain".into()));
            }
        }
        let finite = self
            .layers
            .iter()
            .all(|l| l.weights.iter().chain(l.biases.iter()).all(|v| v.is_finite()));
        if !finite {
            return Err(Error::ShapeMismatch("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Normalized, concatenated input vector for one episode.
    pub fn input_row(&self, member_logits: &[&[f64]]) -> Result<Vec<f64>> {
        let (m, k) = (self.metadata.m, self.metadata.k);
        if member_logits.len() != m {
            return Err(Error::ShapeMismatch(format!("expected {m} member rows, got {}", member_logits.len())));
        }
        let mut x = Vec::with_capacity(m * k);
        for row in member_logits {
            if row.len() != k {
                return Err(Error::ShapeMismatch(format!("expected rows of length {k}, got {}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::ShapeMismatch("non-finite member logit".into()));
            }
            let start = x.len();
            x.extend_from_slice(row);
            self.metadata.normalization.apply(&mut x[start..]);
        }
        Ok(x)
    }

    /// Class probabilities for a batch of already-normalized input rows.
    pub fn predict_proba(&self, inputs: ndarray::ArrayView2<f64>) -> Array2<f64> {
        let acts = network::forward_batch(&self.layers, inputs);
        network::softmax_rows(acts.last().expect("at least one layer"))
    }

    /// Fraction of rows whose argmax matches the label.
    pub fn accuracy(&self, inputs: ndarray::ArrayView2<f64>, labels: &[usize]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        let acts = network::forward_batch(&self.layers, inputs);
        let scores = acts.last().expect("at least one layer");
        let hits = scores
            .axis_iter(Axis(0))
            .zip(labels)
            .filter(|(row, &y)| argmax(row.as_slice().expect("standard layout")) == y)
            .count();
        hits as f64 / labels.len() as f64
    }
}

impl FusionMetadata {
    fn new(mask: EnsembleMask, k: usize, normalization: InputNormalization, seed: u64) -> Self {
        Self {
            mask,
            member_ids: Vec::new(),
            k,
            m: mask.size(),
            normalization,
            seed,
            best_val_accuracy: None,
            best_epoch: None,
            epochs_trained: 0,
        }
    }
}

fn layer_dims(m: usize, k: usize, hidden: &[usize]) -> Vec<usize> {
    let mut dims = vec![m * k];
    dims.extend_from_slice(hidden);
    dims.push(k);
    dims
}

/// Fused class probabilities for one episode.
pub fn forward(params: &FusionParams, member_logits: &[&[f64]]) -> Result<Vec<f64>> {
    let x = params.input_row(member_logits)?;
    let view = ndarray::ArrayView2::from_shape((1, x.len()), &x).expect("row vector");
    Ok(params.predict_proba(view).row(0).to_vec())
}

/// The trained network as a consensus combiner.
pub struct FusionCombiner<'a> {
    pub params: &'a FusionParams,
}

impl Combiner for FusionCombiner<'_> {
    fn name(&self) -> String {
        "fusion".into()
    }

    fn combine(&self, member_logits: &[&[f64]]) -> Result<usize> {
        Ok(argmax(&forward(self.params, member_logits)?))
    }
}

/// Episodic accuracy of the fusion network on a split.
pub fn predict_eval(params: &FusionParams, pool: &Pool, mask: &EnsembleMask, split: &str, episodes: usize) -> Result<EvalSummary> {
    if mask.size() != params.metadata.m || pool.k() != params.metadata.k {
        return Err(Error::ShapeMismatch(format!(
            "params expect m={} K={}, got mask {mask} over K={}",
            params.metadata.m,
            params.metadata.k,
            pool.k()
        )));
    }
    evaluate(&FusionCombiner { params }, pool, mask, split, episodes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    pub max_abs_gradient: f64,
    pub parameters: usize,
}

/// Relative errors are `|a - n| / max(|a| + |n|, floor)`; the floor keeps
/// near-zero gradients from amplifying rounding noise.
pub const GRADIENT_CHECK_FLOOR: f64 = 1e-6;

/// Compares analytic gradients with central finite differences for every
/// parameter on the given batch.
pub fn gradient_check(params: &FusionParams, inputs: ndarray::ArrayView2<f64>, labels: &[usize], h: f64) -> GradientCheck {
    let (_, grads) = network::loss_and_gradients(&params.layers, inputs, labels);
    let mut layers = params.layers.clone();
    let mut worst_rel: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    let mut biggest: f64 = 0.0;
    let mut compare = |analytic: f64, numeric: f64| {
        let diff = (analytic - numeric).abs();
        worst_abs = worst_abs.max(diff);
        worst_rel = worst_rel.max(diff / (analytic.abs() + numeric.abs()).max(GRADIENT_CHECK_FLOOR));
        biggest = biggest.max(analytic.abs());
    };
    for l in 0..layers.len() {
        let (rows, cols) = layers[l].weights.dim();
        for r in 0..rows {
            for c in 0..cols {
                let orig = layers[l].weights[[r, c]];
                layers[l].weights[[r, c]] = orig + h;
                let up = network::loss(&layers, inputs, labels);
                layers[l].weights[[r, c]] = orig - h;
                let down = network::loss(&layers, inputs, labels);
                layers[l].weights[[r, c]] = orig;
                compare(grads.weights[l][[r, c]], (up - down) / (2.0 * h));
            }
        }
        for r in 0..layers[l].biases.len() {
            let orig = layers[l].biases[r];
            layers[l].biases[r] = orig + h;
            let up = network::loss(&layers, inputs, labels);
            layers[l].biases[r] = orig - h;
            let down = network::loss(&layers, inputs, labels);
            layers[l].biases[r] = orig;
            compare(grads.biases[l][r], (up - down) / (2.0 * h));
        }
    }
    GradientCheck {
        max_relative_error: worst_rel,
        max_abs_error: worst_abs,
        max_abs_gradient: biggest,
        parameters: params.parameter_count(),
    }
}

/// Mean cross-entropy of the network on a batch.
pub fn batch_loss(params: &FusionParams, inputs: ndarray::ArrayView2<f64>, labels: &[usize]) -> f64 {
    network::loss(&params.layers, inputs, labels)
}

/// Analytic gradient of [`batch_loss`], flattened layer by layer (weights
/// row-major, then biases).
pub fn batch_gradient(params: &FusionParams, inputs: ndarray::ArrayView2<f64>, labels: &[usize]) -> Vec<f64> {
    let (_, grads) = network::loss_and_gradients(&params.layers, inputs, labels);
    let mut flat = Vec::with_capacity(params.parameter_count());
    for (w, b) in grads.weights.iter().zip(&grads.biases) {
        flat.extend(w.iter());
        flat.extend(b.iter());
    }
    flat
}
