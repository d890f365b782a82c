//! Synthetic pools with planted correctness structure.
//!
//! Each episode draws a shared latent difficulty `t ~ N(0, 1)`. Model `i`
//! scores `l_i * t + sqrt(1 - l_i^2) * e_i` with independent `e_i ~ N(0, 1)`
//! and is correct when the score clears `Phi^-1(1 - accuracy_i)`, so its
//! marginal accuracy is exact and pairwise failure correlation grows with the
//! loadings (`l_i = sqrt(rho)` unless overridden). Logits are then drawn so
//! that the argmax is the true class when correct and a wrong class
//! otherwise, separated from the runner-up by the configured margin.
//!
//! An optional regime plan assigns episodes to "expert" members that are
//! correct with their own accuracy and emit a larger margin; the others can be
//! made to agree on a shared decoy class when wrong.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::logitstore::{CorrectnessMatrix, LogitMatrix, LogitRecord, ModelEntry, Pool, PoolManifest, NOVEL, TRAIN, VAL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimePlan {
    /// Episode `e` belongs to `experts[(e / block_len) % experts.len()]`.
    pub experts: Vec<usize>,
    #[serde(default = "one")]
    pub block_len: usize,
    pub expert_accuracy: f64,
    pub expert_margin: f64,
    /// Wrong non-experts all pick the same decoy class.
    #[serde(default)]
    pub shared_decoy: bool,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSwitch {
    pub batch: usize,
    pub plan: RegimePlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamLayout {
    pub batches: usize,
    pub episodes_per_batch: usize,
    #[serde(default = "stream_split")]
    pub split: String,
}

fn stream_split() -> String {
    "stream".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(default = "synth_name")]
    pub name: String,
    pub n_models: usize,
    pub k: usize,
    #[serde(default = "one")]
    pub shots: usize,
    /// Episodes per split tag.
    #[serde(default)]
    pub episodes: BTreeMap<String, usize>,
    pub accuracies: Vec<f64>,
    #[serde(default)]
    pub rho: f64,
    /// Signed per-model latent loadings; overrides `rho` when present.
    #[serde(default)]
    pub loadings: Option<Vec<f64>>,
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Realized margins are `margin * (1 + jitter * (u - 0.5))`, `u ~ U[0, 1)`.
    #[serde(default = "default_jitter")]
    pub margin_jitter: f64,
    /// Standard deviation of the non-predicted logits.
    #[serde(default = "default_noise")]
    pub logit_noise: f64,
    #[serde(default)]
    pub regimes: Option<RegimePlan>,
    #[serde(default)]
    pub switches: Vec<RegimeSwitch>,
    #[serde(default)]
    pub stream: Option<StreamLayout>,
    pub seed: u64,
}

fn synth_name() -> String {
    "synthetic".into()
}
fn default_margin() -> f64 {
    2.0
}
fn default_jitter() -> f64 {
    0.5
}
fn default_noise() -> f64 {
    1.0
}

impl SynthSpec {
    /// Independent-ish pool with the given accuracies and the standard three splits.
    pub fn new(accuracies: Vec<f64>, k: usize, episodes: usize, rho: f64, seed: u64) -> Self {
        Self {
            name: synth_name(),
            n_models: accuracies.len(),
            k,
            shots: 1,
            episodes: [TRAIN, VAL, NOVEL].iter().map(|s| (s.to_string(), episodes)).collect(),
            accuracies,
            rho,
            loadings: None,
            margin: default_margin(),
            margin_jitter: default_jitter(),
            logit_noise: default_noise(),
            regimes: None,
            switches: Vec::new(),
            stream: None,
            seed,
        }
    }

    fn loadings(&self) -> Vec<f64> {
        self.loadings
            .clone()
            .unwrap_or_else(|| vec![self.rho.sqrt(); self.n_models])
    }

    // Negated comparisons so that NaN fields are rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InfeasibleSpec(msg));
        if self.n_models < 2 || self.n_models > crate::mask::MAX_POOL {
            return bad(format!("n_models {} outside 2..={}", self.n_models, crate::mask::MAX_POOL));
        }
        if self.k < 2 {
            return bad(format!("k must be at least 2, got {}", self.k));
        }
        if self.accuracies.len() != self.n_models {
            return bad(format!("{} accuracies for {} models", self.accuracies.len(), self.n_models));
        }
        if let Some(a) = self.accuracies.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return bad(format!("target accuracy {a} must lie strictly inside (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!("rho {} must lie in [0, 1)", self.rho));
        }
        if let Some(l) = &self.loadings {
            if l.len() != self.n_models || l.iter().any(|v| !(v.abs() <= 1.0)) {
                return bad("loadings need one value in [-1, 1] per model".into());
            }
        }
        if !(self.margin > 0.0) || !(0.0..2.0).contains(&self.margin_jitter) || !(self.logit_noise >= 0.0) {
            return bad("margin must be positive, jitter in [0, 2), noise non-negative".into());
        }
        if self.episodes.is_empty() && self.stream.is_none() {
            return bad("no splits requested".into());
        }
        let plans = self.regimes.iter().chain(self.switches.iter().map(|s| &s.plan));
        for plan in plans {
            if plan.experts.is_empty() || plan.experts.iter().any(|&e| e >= self.n_models) {
                return bad("regime experts must name pool members".into());
            }
            if plan.block_len == 0 || !(0.0..=1.0).contains(&plan.expert_accuracy) || !(plan.expert_margin > 0.0) {
                return bad("regime plan needs block_len >= 1, accuracy in [0, 1], positive margin".into());
            }
        }
        if let Some(stream) = &self.stream {
            if stream.batches == 0 || stream.episodes_per_batch == 0 {
                return bad("stream layout needs at least one non-empty batch".into());
            }
        }
        Ok(())
    }

    fn plan_for_batch(&self, batch: usize) -> Option<&RegimePlan> {
        self.switches
            .iter()
            .filter(|s| s.batch <= batch)
            .max_by_key(|s| s.batch)
            .map(|s| &s.plan)
            .or(self.regimes.as_ref())
    }
}

/// A generated pool together with the correctness bits it was built from.
#[derive(Debug, Clone)]
pub struct SynthPool {
    pub pool: Pool,
    pub planted: BTreeMap<String, CorrectnessMatrix>,
}

fn fnv1a(text: &str) -> u64 {
    text.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// splitmix64 finalizer, used to derive independent per-episode seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn episode_rng(seed: u64, split: &str, batch: usize, episode: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(mix(seed) ^ fnv1a(split)) ^ batch as u64) ^ episode as u64)
}

fn std_normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn wrong_class(rng: &mut impl Rng, y: usize, k: usize) -> usize {
    let c = rng.random_range(0..k - 1);
    if c >= y {
        c + 1
    } else {
        c
    }
}

/// Logits with `pred` on top, `margin` (jittered) above the runner-up.
fn synth_logits(rng: &mut impl Rng, pred: usize, k: usize, margin: f64, jitter: f64, noise: f64) -> Vec<f64> {
    let mut z: Vec<f64> = (0..k).map(|_| noise * std_normal(rng)).collect();
    let runner_up = z
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != pred)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let u: f64 = rng.random();
    z[pred] = runner_up + margin * (1.0 + jitter * (u - 0.5));
    z
}

struct Episode {
    y: usize,
    correct: Vec<bool>,
    logits: Vec<Vec<f64>>,
}

fn draw_episode(spec: &SynthSpec, thresholds: &[f64], loadings: &[f64], plan: Option<&RegimePlan>, rng: &mut ChaCha8Rng, e: usize) -> Episode {
    let k = spec.k;
    let y = rng.random_range(0..k);
    let latent = std_normal(rng);
    let expert = plan.map(|p| p.experts[(e / p.block_len) % p.experts.len()]);
    let decoy = wrong_class(rng, y, k);
    let mut correct = Vec::with_capacity(spec.n_models);
    let mut logits = Vec::with_capacity(spec.n_models);
    for i in 0..spec.n_models {
        let noise = std_normal(rng);
        let u: f64 = rng.random();
        let l = loadings[i];
        let score = l * latent + (1.0 - l * l).max(0.0).sqrt() * noise;
        let is_expert = expert == Some(i);
        let ok = match plan {
            Some(p) if is_expert => u < p.expert_accuracy,
            _ => score > thresholds[i],
        };
        let pred = if ok {
            y
        } else if plan.is_some_and(|p| p.shared_decoy) && !is_expert {
            decoy
        } else {
            wrong_class(rng, y, k)
        };
        let margin = match plan {
            Some(p) if is_expert => p.expert_margin,
            _ => spec.margin,
        };
        correct.push(ok);
        logits.push(synth_logits(rng, pred, k, margin, spec.margin_jitter, spec.logit_noise));
    }
    Episode { y, correct, logits }
}

fn manifest_for(spec: &SynthSpec, name: String) -> PoolManifest {
    PoolManifest {
        pool_name: name,
        k: spec.k,
        shots: spec.shots,
        models: (0..spec.n_models)
            .map(|i| ModelEntry {
                model_id: format!("m{i}"),
                backbone: "synthetic".into(),
                distance: "synthetic".into(),
                files: BTreeMap::new(),
            })
            .collect(),
        episode_counts: BTreeMap::new(),
    }
}

fn build_split(spec: &SynthSpec, split: &str, episodes: usize, batch: usize) -> Result<(Vec<LogitMatrix>, CorrectnessMatrix)> {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let thresholds: Vec<f64> = spec.accuracies.iter().map(|a| normal.inverse_cdf(1.0 - a)).collect();
    let loadings = spec.loadings();
    let plan = spec.plan_for_batch(batch);
    let drawn: Vec<Episode> = (0..episodes)
        .into_par_iter()
        .map(|e| {
            let mut rng = episode_rng(spec.seed, split, batch, e);
            draw_episode(spec, &thresholds, &loadings, plan, &mut rng, e)
        })
        .collect();
    let mut matrices = Vec::with_capacity(spec.n_models);
    let mut rows = Vec::with_capacity(spec.n_models);
    for i in 0..spec.n_models {
        let records = drawn.iter().enumerate().map(|(e, ep)| LogitRecord {
            episode_id: e as u64,
            y_true: ep.y,
            logits: ep.logits[i].clone(),
        });
        matrices.push(LogitMatrix::from_records(format!("m{i}"), split, spec.k, spec.shots, records)?);
        rows.push(drawn.iter().map(|ep| ep.correct[i]).collect());
    }
    Ok((
        matrices,
        CorrectnessMatrix {
            split: split.to_string(),
            rows,
        },
    ))
}

/// Generates every split in `spec.episodes`.
pub fn generate(spec: &SynthSpec) -> Result<SynthPool> {
    spec.validate()?;
    if spec.episodes.is_empty() {
        return Err(Error::InfeasibleSpec("no splits requested".into()));
    }
    let mut splits = BTreeMap::new();
    let mut planted = BTreeMap::new();
    for (tag, &count) in &spec.episodes {
        let (matrices, corr) = build_split(spec, tag, count, 0)?;
        splits.insert(tag.clone(), matrices);
        planted.insert(tag.clone(), corr);
    }
    Ok(SynthPool {
        pool: Pool::new(manifest_for(spec, spec.name.clone()), splits)?,
        planted,
    })
}

/// Generates `spec.stream.batches` single-split pools, applying regime
/// switches at their batch indices.
pub fn generate_stream(spec: &SynthSpec) -> Result<Vec<SynthPool>> {
    spec.validate()?;
    let layout = spec
        .stream
        .as_ref()
        .ok_or_else(|| Error::InfeasibleSpec("spec has no stream layout".into()))?;
    (0..layout.batches)
        .map(|b| {
            let (matrices, corr) = build_split(spec, &layout.split, layout.episodes_per_batch, b)?;
            let pool = Pool::new(
                manifest_for(spec, format!("{}_batch{b:03}", spec.name)),
                BTreeMap::from([(layout.split.clone(), matrices)]),
            )?;
            Ok(SynthPool {
                pool,
                planted: BTreeMap::from([(layout.split.clone(), corr)]),
            })
        })
        .collect()
}

/// Members of [`plant_ablation_pool`] with complementary errors.
pub const ABLATION_TRIO: [usize; 3] = [1, 4, 8];
/// Episodes per split in [`plant_ablation_pool`].
pub const ABLATION_EPISODES: usize = 600;

/// Ten-model pool: three members fail on disjoint episode sets (each on one
/// quarter of the episodes, confidently) and the other seven are near-copies
/// of one shared base model that fails independently of them.
///
/// Any two trio members outvote the third, so the trio's plurality vote is
/// always right, while the clones outvote the trio in the full team.
pub fn plant_ablation_pool(seed: u64) -> Result<SynthPool> {
    const N: usize = 10;
    const K: usize = 5;
    const CLONE_FAIL: f64 = 0.25;
    const CLONE_DEVIATION: f64 = 0.02;
    let clones: Vec<usize> = (0..N).filter(|i| !ABLATION_TRIO.contains(i)).collect();
    let spec = SynthSpec {
        name: "ablation".into(),
        ..SynthSpec::new(vec![0.75; N], K, ABLATION_EPISODES, 0.0, seed)
    };

    let mut splits = BTreeMap::new();
    let mut planted = BTreeMap::new();
    for tag in [TRAIN, VAL, NOVEL] {
        let drawn: Vec<Episode> = (0..ABLATION_EPISODES)
            .map(|e| {
                let mut rng = episode_rng(seed, tag, usize::MAX, e);
                let y = rng.random_range(0..K);
                let regime = rng.random_range(0..4usize);
                let base_ok = rng.random::<f64>() >= CLONE_FAIL;
                let base_pred = if base_ok { y } else { wrong_class(&mut rng, y, K) };
                let mut correct = vec![true; N];
                let mut logits = vec![Vec::new(); N];
                for (slot, &i) in ABLATION_TRIO.iter().enumerate() {
                    let fails = regime == slot;
                    let pred = if fails { wrong_class(&mut rng, y, K) } else { y };
                    let margin = if fails { 3.0 } else { 1.0 };
                    correct[i] = !fails;
                    logits[i] = synth_logits(&mut rng, pred, K, margin, 0.3, 0.5);
                }
                for &i in &clones {
                    let deviate = rng.random::<f64>() < CLONE_DEVIATION;
                    let pred = match (deviate, base_ok) {
                        (false, _) => base_pred,
                        (true, true) => wrong_class(&mut rng, y, K),
                        (true, false) => y,
                    };
                    correct[i] = pred == y;
                    logits[i] = synth_logits(&mut rng, pred, K, 2.0, 0.3, 0.5);
                }
                Episode { y, correct, logits }
            })
            .collect();
        let mut matrices = Vec::with_capacity(N);
        let mut rows = Vec::with_capacity(N);
        for i in 0..N {
            let records = drawn.iter().enumerate().map(|(e, ep)| LogitRecord {
                episode_id: e as u64,
                y_true: ep.y,
                logits: ep.logits[i].clone(),
            });
            matrices.push(LogitMatrix::from_records(format!("m{i}"), tag, K, 1, records)?);
            rows.push(drawn.iter().map(|ep| ep.correct[i]).collect());
        }
        splits.insert(tag.to_string(), matrices);
        planted.insert(tag.to_string(), CorrectnessMatrix { split: tag.to_string(), rows });
    }
    Ok(SynthPool {
        pool: Pool::new(manifest_for(&spec, spec.name.clone()), splits)?,
        planted,
    })
}

/// Ready-made specs for the planted scenarios used across the test suites.
pub mod presets {
    use super::*;

    /// N models with accuracies drawn from [0.55, 0.8] and moderate correlation.
    pub fn random_pool(n: usize, episodes: usize, seed: u64) -> SynthSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ 0xacc));
        let accuracies = (0..n).map(|_| rng.random_range(0.55..0.8)).collect();
        let mut spec = SynthSpec::new(accuracies, 5, episodes, 0.3, seed);
        spec.name = format!("random{n}");
        spec
    }

    /// Member 0 is (almost) always right, member 1 guesses.
    pub fn copy_member(seed: u64) -> SynthSpec {
        let mut spec = SynthSpec::new(vec![0.995, 0.2], 5, 600, 0.0, seed);
        spec.episodes.insert(TRAIN.into(), 1500);
        spec.name = "copy_member".into();
        spec
    }

    /// Three members, each the reliable and confident expert on a third of the
    /// episodes; when wrong, the two non-experts agree on a decoy class.
    pub fn complementary(seed: u64) -> SynthSpec {
        let mut spec = SynthSpec::new(vec![0.45; 3], 5, 600, 0.5, seed);
        spec.episodes.insert(TRAIN.into(), 1500);
        spec.episodes.insert(VAL.into(), 300);
        spec.name = "complementary".into();
        spec.margin = 2.0;
        spec.margin_jitter = 0.3;
        spec.regimes = Some(RegimePlan {
            experts: vec![0, 1, 2],
            block_len: 1,
            expert_accuracy: 0.95,
            expert_margin: 4.5,
            shared_decoy: true,
        });
        spec
    }

    /// Victim `m0` with two positively correlated peers and an anti-correlated
    /// partner `m3`.
    pub fn victim_partner(seed: u64) -> SynthSpec {
        let mut spec = SynthSpec::new(vec![0.6; 5], 5, 600, 0.0, seed);
        spec.name = "victim_partner".into();
        spec.loadings = Some(vec![0.8, 0.8, 0.8, -0.8, 0.0]);
        spec
    }

    /// Ten batches of 2000 episodes; `m0` is the expert until batch
    /// `switch_at`, `m3` afterwards.
    pub fn domain_switch(seed: u64, switch_at: usize) -> SynthSpec {
        let mut spec = SynthSpec::new(vec![0.5; 5], 5, 0, 0.3, seed);
        spec.episodes.clear();
        spec.name = "domain_switch".into();
        let plan = |expert: usize| RegimePlan {
            experts: vec![expert],
            block_len: 1,
            expert_accuracy: 0.9,
            expert_margin: 3.0,
            shared_decoy: false,
        };
        spec.regimes = Some(plan(0));
        spec.switches = vec![RegimeSwitch { batch: switch_at, plan: plan(3) }];
        spec.stream = Some(StreamLayout {
            batches: 10,
            episodes_per_batch: 2000,
            split: stream_split(),
        });
        spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infeasible_specs_are_rejected() {
        let ok = SynthSpec::new(vec![0.6, 0.7], 5, 10, 0.2, 1);
        assert!(ok.validate().is_ok());
        let mut s = ok.clone();
        s.accuracies = vec![1.0, 0.7];
        assert!(matches!(generate(&s), Err(Error::InfeasibleSpec(_))));
        let mut s = ok.clone();
        s.rho = 1.0;
        assert!(s.validate().is_err());
        let mut s = ok.clone();
        s.k = 1;
        assert!(s.validate().is_err());
        let mut s = ok;
        s.loadings = Some(vec![0.5, 1.5]);
        assert!(s.validate().is_err());
    }

    #[test]
    fn wrong_class_never_true() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let y = rng.random_range(0..5);
            assert_ne!(wrong_class(&mut rng, y, 5), y);
        }
    }

    #[test]
    fn logits_put_prediction_on_top() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in 0..5 {
            let z = synth_logits(&mut rng, p, 5, 0.5, 0.9, 3.0);
            assert_eq!(crate::logitstore::argmax(&z), p);
        }
    }

    #[test]
    fn switch_plan_lookup() {
        let spec = presets::domain_switch(1, 5);
        assert_eq!(spec.plan_for_batch(4).unwrap().experts, vec![0]);
        assert_eq!(spec.plan_for_batch(5).unwrap().experts, vec![3]);
        assert_eq!(spec.plan_for_batch(9).unwrap().experts, vec![3]);
    }
}
