//! Focal error diversity, Cohen's kappa, and the pruning score.
//!
//! For an ensemble of `m` members and a focal member, only the episodes on
//! which the focal member fails are considered. `n_j` counts those episodes on
//! which exactly `j` members (the focal one included) fail. With
//! `p_j = n_j / total`,
//!
//! ```text
//! sigma = 1 - sum_j [j(j-1) / (m(m-1))] p_j  /  sum_j [j/m] p_j
//! ```
//!
//! The numerator is the chance that two members drawn at random both fail, the
//! denominator the chance that one drawn member fails. Focal diversity
//! (`lambda`) is the mean of sigma over all members.

use serde::{Deserialize, Serialize};

use crate::consensus::plurality_from_counts;
use crate::error::{Error, Result};
use crate::logitstore::{softmax, CorrectnessMatrix, Pool};
use crate::mask::EnsembleMask;

const CLAMP_TOLERANCE: f64 = 1e-12;

/// Convex weights of the pruning score `w1 * accuracy + w2 * lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub w1: f64,
    pub w2: f64,
}

impl Weights {
    pub fn new(w1: f64, w2: f64) -> Result<Self> {
        if !(w1 >= 0.0 && w2 >= 0.0 && ((w1 + w2) - 1.0).abs() <= 1e-9) {
            return Err(Error::WeightsNotConvex { w1, w2 });
        }
        Ok(Self { w1, w2 })
    }
}

impl Default for Weights {
    fn default() -> Self {
        Self { w1: 0.6, w2: 0.4 }
    }
}

pub fn pruning_score(accuracy: f64, lambda: f64, weights: Weights) -> f64 {
    weights.w1 * accuracy + weights.w2 * lambda
}

/// `counts[j - 1]` is the number of focal-failure episodes on which exactly
/// `j` members failed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureHistogram {
    pub counts: Vec<u64>,
    pub total: u64,
}

impl FailureHistogram {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        Self { counts, total }
    }

    pub fn ensemble_size(&self) -> usize {
        self.counts.len()
    }

    /// `None` when the focal member never fails.
    pub fn sigma(&self) -> Option<f64> {
        sigma_from_counts(&self.counts)
    }
}

pub fn sigma_from_counts(counts: &[u64]) -> Option<f64> {
    let m = counts.len();
    assert!(m >= 2, "focal negative correlation needs at least 2 members");
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return None;
    }
    let total = total as f64;
    let mf = m as f64;
    let pair_norm = mf * (mf - 1.0);
    let mut both = 0.0;
    let mut one = 0.0;
    for (idx, &n) in counts.iter().enumerate() {
        let j = (idx + 1) as f64;
        let p = n as f64 / total;
        both += j * (j - 1.0) / pair_norm * p;
        one += j / mf * p;
    }
    let sigma = 1.0 - both / one;
    debug_assert!(
        (-CLAMP_TOLERANCE..=1.0 + CLAMP_TOLERANCE).contains(&sigma),
        "sigma {sigma} out of range"
    );
    Some(sigma.clamp(0.0, 1.0))
}

fn check_focal(mask: &EnsembleMask, focal: usize) -> Result<()> {
    if !mask.contains(focal) {
        return Err(Error::FocalNotInMask(focal));
    }
    Ok(())
}

fn check_mask(corr: &CorrectnessMatrix, mask: &EnsembleMask) -> Result<()> {
    if mask.pool_size() != corr.n_models() {
        return Err(Error::InvalidMask(format!(
            "mask {mask} is over {} models, correctness matrix has {}",
            mask.pool_size(),
            corr.n_models()
        )));
    }
    if mask.size() < 2 {
        return Err(Error::InvalidMask(format!("{mask} has fewer than 2 members")));
    }
    Ok(())
}

pub fn failure_histogram(corr: &CorrectnessMatrix, mask: &EnsembleMask, focal: usize) -> Result<FailureHistogram> {
    check_mask(corr, mask)?;
    check_focal(mask, focal)?;
    let members = mask.members();
    let mut counts = vec![0u64; members.len()];
    for e in 0..corr.episodes() {
        if corr.get(focal, e) {
            continue;
        }
        let failing = members.iter().filter(|&&i| !corr.get(i, e)).count();
        counts[failing - 1] += 1;
    }
    Ok(FailureHistogram::from_counts(counts))
}

pub fn focal_sigma(corr: &CorrectnessMatrix, mask: &EnsembleMask, focal: usize) -> Result<f64> {
    failure_histogram(corr, mask, focal)?
        .sigma()
        .ok_or(Error::FocalNeverFails(focal))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalDiversity {
    pub lambda: f64,
    /// One entry per member in ascending model order; `None` when that member
    /// never fails.
    pub sigma_per_focal: Vec<Option<f64>>,
    /// Members whose sigma is undefined and were left out of the average.
    pub never_failed: Vec<usize>,
}

/// Mean focal negative correlation over the defined members. If no member
/// ever fails the ensemble is treated as maximally diverse (lambda = 1).
pub fn focal_diversity(corr: &CorrectnessMatrix, mask: &EnsembleMask) -> Result<FocalDiversity> {
    check_mask(corr, mask)?;
    let members = mask.members();
    let mut sigmas = Vec::with_capacity(members.len());
    for &i in &members {
        sigmas.push(failure_histogram(corr, mask, i)?.sigma());
    }
    Ok(average_sigmas(&members, sigmas))
}

fn average_sigmas(members: &[usize], sigmas: Vec<Option<f64>>) -> FocalDiversity {
    let defined: Vec<f64> = sigmas.iter().flatten().copied().collect();
    let lambda = if defined.is_empty() {
        1.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    let never_failed = members
        .iter()
        .zip(&sigmas)
        .filter(|(_, s)| s.is_none())
        .map(|(&i, _)| i)
        .collect();
    FocalDiversity {
        lambda,
        sigma_per_focal: sigmas,
        never_failed,
    }
}

/// Cohen's kappa between two label sequences over `k` classes.
///
/// When both raters are constant and identical the chance agreement is 1 and
/// kappa is defined as 1.
pub fn cohen_kappa(a: &[usize], b: &[usize], k: usize) -> f64 {
    assert_eq!(a.len(), b.len(), "kappa needs equally long label sequences");
    let n = a.len() as f64;
    let mut agree = 0usize;
    let mut ca = vec![0usize; k];
    let mut cb = vec![0usize; k];
    for (&x, &y) in a.iter().zip(b) {
        agree += usize::from(x == y);
        ca[x] += 1;
        cb[y] += 1;
    }
    let po = agree as f64 / n;
    let pe: f64 = ca.iter().zip(&cb).map(|(&x, &y)| (x as f64 / n) * (y as f64 / n)).sum();
    if 1.0 - pe <= f64::EPSILON {
        return 1.0;
    }
    (po - pe) / (1.0 - pe)
}

/// Mean pairwise kappa over all member pairs. Lower means more diverse.
pub fn kappa_score(predictions: &[Vec<usize>], mask: &EnsembleMask, k: usize) -> Result<f64> {
    if mask.size() < 2 {
        return Err(Error::InvalidMask(format!("{mask} has fewer than 2 members")));
    }
    let members = mask.members();
    if let Some(&i) = members.iter().find(|&&i| i >= predictions.len()) {
        return Err(Error::InvalidMask(format!("member {i} has no predictions")));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (x, &i) in members.iter().enumerate() {
        for &j in &members[x + 1..] {
            sum += cohen_kappa(&predictions[i], &predictions[j], k);
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub mask: EnsembleMask,
    pub members: Vec<String>,
    pub split: String,
    pub sigma_per_focal: Vec<Option<f64>>,
    pub lambda_focal: f64,
    pub kappa: Option<f64>,
    /// Plurality-voting accuracy on the split, as a fraction.
    pub val_accuracy: f64,
    pub weights: Weights,
    /// `w1 * val_accuracy + w2 * lambda_focal`, or `w2 * victim_sigma` in
    /// place of lambda for defense searches.
    pub pruning_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub victim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub victim_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Accuracy and diversity of one candidate, the quantities a search ranks on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateScore {
    pub accuracy: f64,
    /// lambda, or the victim's sigma in defense mode.
    pub diversity: f64,
}

/// Precomputed per-split data for scoring many masks quickly.
///
/// Building one costs a single pass over the split; afterwards each mask is
/// scored in O(m * E) without touching the logits again.
#[derive(Debug, Clone)]
pub struct MaskScorer {
    split: String,
    model_ids: Vec<String>,
    k: usize,
    episodes: usize,
    fails: Vec<Vec<u8>>,
    preds: Vec<Vec<u16>>,
    probs: Vec<Vec<f64>>,
    labels: Vec<u16>,
}

impl MaskScorer {
    pub fn new(pool: &Pool, split: &str) -> Result<Self> {
        let matrices = pool.split(split)?;
        let k = pool.k();
        if k > u16::MAX as usize {
            return Err(Error::InvalidConfig(format!("K={k} is too large")));
        }
        let labels: Vec<u16> = matrices[0].labels().iter().map(|&y| y as u16).collect();
        let mut fails = Vec::with_capacity(matrices.len());
        let mut preds = Vec::with_capacity(matrices.len());
        let mut probs = Vec::with_capacity(matrices.len());
        for m in matrices {
            let p: Vec<u16> = m.predictions().into_iter().map(|c| c as u16).collect();
            fails.push(p.iter().zip(&labels).map(|(a, b)| u8::from(a != b)).collect());
            preds.push(p);
            probs.push((0..m.len()).flat_map(|e| softmax(m.row(e))).collect());
        }
        Ok(Self {
            split: split.to_string(),
            model_ids: pool.model_ids().into_iter().map(String::from).collect(),
            k,
            episodes: labels.len(),
            fails,
            preds,
            probs,
            labels,
        })
    }

    pub fn n_models(&self) -> usize {
        self.fails.len()
    }

    pub fn episodes(&self) -> usize {
        self.episodes
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    pub fn model_ids(&self) -> &[String] {
        &self.model_ids
    }

    /// Per-episode number of failing members.
    fn fail_counts(&self, members: &[usize]) -> Vec<u8> {
        let mut counts = vec![0u8; self.episodes];
        for &i in members {
            for (c, &f) in counts.iter_mut().zip(&self.fails[i]) {
                *c += f;
            }
        }
        counts
    }

    fn histogram(&self, counts: &[u8], focal: usize, m: usize) -> Vec<u64> {
        let mut hist = vec![0u64; m];
        for (&c, &f) in counts.iter().zip(&self.fails[focal]) {
            if f != 0 {
                hist[c as usize - 1] += 1;
            }
        }
        hist
    }

    pub fn failure_histogram(&self, mask: &EnsembleMask, focal: usize) -> Result<FailureHistogram> {
        check_focal(mask, focal)?;
        let members = mask.members();
        let counts = self.fail_counts(&members);
        Ok(FailureHistogram::from_counts(self.histogram(&counts, focal, members.len())))
    }

    /// Plurality-voting accuracy (fraction) of the members on this split.
    pub fn plurality_accuracy(&self, members: &[usize]) -> f64 {
        let mut votes = vec![0u32; self.k];
        let mut correct = 0usize;
        let m = members.len() as f64;
        for e in 0..self.episodes {
            votes.iter_mut().for_each(|v| *v = 0);
            for &i in members {
                votes[self.preds[i][e] as usize] += 1;
            }
            let winner = plurality_from_counts(&votes, |c| {
                members.iter().map(|&i| self.probs[i][e * self.k + c]).sum::<f64>() / m
            });
            correct += usize::from(winner == self.labels[e] as usize);
        }
        correct as f64 / self.episodes as f64
    }

    pub fn focal_diversity(&self, mask: &EnsembleMask) -> FocalDiversity {
        let members = mask.members();
        let counts = self.fail_counts(&members);
        let sigmas = members
            .iter()
            .map(|&i| sigma_from_counts(&self.histogram(&counts, i, members.len())))
            .collect();
        average_sigmas(&members, sigmas)
    }

    /// Accuracy plus lambda, the pruning-search fitness inputs.
    pub fn score(&self, mask: &EnsembleMask) -> CandidateScore {
        let members = mask.members();
        CandidateScore {
            accuracy: self.plurality_accuracy(&members),
            diversity: self.focal_diversity(mask).lambda,
        }
    }

    /// Accuracy plus the victim's sigma. An undefined sigma (victim never
    /// fails) counts as 1.
    pub fn score_victim(&self, mask: &EnsembleMask, victim: usize) -> CandidateScore {
        let members = mask.members();
        let counts = self.fail_counts(&members);
        let sigma = sigma_from_counts(&self.histogram(&counts, victim, members.len())).unwrap_or(1.0);
        CandidateScore {
            accuracy: self.plurality_accuracy(&members),
            diversity: sigma,
        }
    }

    pub fn kappa(&self, mask: &EnsembleMask) -> Result<f64> {
        let preds: Vec<Vec<usize>> = self
            .preds
            .iter()
            .map(|p| p.iter().map(|&c| c as usize).collect())
            .collect();
        kappa_score(&preds, mask, self.k)
    }

    pub fn report(
        &self,
        mask: &EnsembleMask,
        weights: Weights,
        victim: Option<usize>,
        with_kappa: bool,
    ) -> Result<DiversityReport> {
        if mask.pool_size() != self.n_models() {
            return Err(Error::InvalidMask(format!(
                "mask {mask} does not match pool of {} models",
                self.n_models()
            )));
        }
        if mask.size() < 2 {
            return Err(Error::InvalidMask(format!("{mask} has fewer than 2 members")));
        }
        let members = mask.members();
        let diversity = self.focal_diversity(mask);
        let accuracy = self.plurality_accuracy(&members);
        let mut warnings: Vec<String> = diversity
            .never_failed
            .iter()
            .map(|&i| {
                format!(
                    "model {} never fails on {}; its focal term is excluded from lambda",
                    self.model_ids[i], self.split
                )
            })
            .collect();
        let (victim_sigma, score) = match victim {
            Some(v) => {
                check_focal(mask, v)?;
                let s = self.score_victim(mask, v).diversity;
                if self.fails[v].iter().all(|&f| f == 0) {
                    warnings.push(format!(
                        "victim {} never fails on {}; its sigma is taken as 1",
                        self.model_ids[v], self.split
                    ));
                }
                (Some(s), pruning_score(accuracy, s, weights))
            }
            None => (None, pruning_score(accuracy, diversity.lambda, weights)),
        };
        Ok(DiversityReport {
            mask: *mask,
            members: members.iter().map(|&i| self.model_ids[i].clone()).collect(),
            split: self.split.clone(),
            sigma_per_focal: diversity.sigma_per_focal,
            lambda_focal: diversity.lambda,
            kappa: if with_kappa { Some(self.kappa(mask)?) } else { None },
            val_accuracy: accuracy,
            weights,
            pruning_score: score,
            victim,
            victim_sigma,
            warnings,
        })
    }
}

/// Full report for one mask on one split of a pool.
pub fn diversity_report(pool: &Pool, split: &str, mask: &EnsembleMask, weights: Weights) -> Result<DiversityReport> {
    MaskScorer::new(pool, split)?.report(mask, weights, None, true)
}
