//! Non-parametric combiners and the episodic accuracy evaluator.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logitstore::{argmax, softmax, Pool};
use crate::mask::EnsembleMask;

/// Default number of evaluation episodes.
pub const DEFAULT_EPISODES: usize = 600;

/// Maps the logits of the ensemble members on one episode to a class.
pub trait Combiner: Sync {
    fn name(&self) -> String;

    /// `member_logits[i]` is the raw logit row of the i-th member (in mask order).
    fn combine(&self, member_logits: &[&[f64]]) -> Result<usize>;
}

/// Modal class; ties go to the tied class with the highest `mean_prob`, then
/// the lowest index.
pub(crate) fn plurality_from_counts(counts: &[u32], mut mean_prob: impl FnMut(usize) -> f64) -> usize {
    let top = counts.iter().copied().max().unwrap_or(0);
    let mut tied = counts.iter().enumerate().filter(|(_, &c)| c == top).map(|(i, _)| i);
    let first = tied.next().unwrap_or(0);
    let mut rest = tied.peekable();
    if rest.peek().is_none() {
        return first;
    }
    let mut best = first;
    let mut best_prob = mean_prob(first);
    for c in rest {
        let p = mean_prob(c);
        if p > best_prob {
            best = c;
            best_prob = p;
        }
    }
    best
}

/// Plurality vote over `predictions` (class indices); `mean_probs` is the
/// members' mean softmax row and only matters for ties.
pub fn plurality_vote(predictions: &[usize], mean_probs: &[f64]) -> usize {
    let mut counts = vec![0u32; mean_probs.len()];
    for &p in predictions {
        counts[p] += 1;
    }
    plurality_from_counts(&counts, |c| mean_probs[c])
}

fn mean_rows(rows: &[&[f64]]) -> Vec<f64> {
    let k = rows[0].len();
    let m = rows.len() as f64;
    (0..k).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / m).collect()
}

/// Argmax of the element-wise mean of softmax rows.
pub fn simple_mean(prob_rows: &[&[f64]]) -> Result<usize> {
    for row in prob_rows {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::RowNotNormalized(sum));
        }
    }
    Ok(argmax(&mean_rows(prob_rows)))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Plurality;

impl Combiner for Plurality {
    fn name(&self) -> String {
        "plurality".into()
    }

    fn combine(&self, member_logits: &[&[f64]]) -> Result<usize> {
        let probs: Vec<Vec<f64>> = member_logits.iter().map(|z| softmax(z)).collect();
        let rows: Vec<&[f64]> = probs.iter().map(Vec::as_slice).collect();
        let preds: Vec<usize> = member_logits.iter().map(|z| argmax(z)).collect();
        Ok(plurality_vote(&preds, &mean_rows(&rows)))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SimpleMean;

impl Combiner for SimpleMean {
    fn name(&self) -> String {
        "mean".into()
    }

    fn combine(&self, member_logits: &[&[f64]]) -> Result<usize> {
        let probs: Vec<Vec<f64>> = member_logits.iter().map(|z| softmax(z)).collect();
        let rows: Vec<&[f64]> = probs.iter().map(Vec::as_slice).collect();
        simple_mean(&rows)
    }
}

/// Mean accuracy and 95% confidence half-width, both in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub method: String,
    pub split: String,
    pub episodes: usize,
    pub accuracy: f64,
    pub ci95: f64,
}

/// Summarizes per-episode 0/1 correctness. The half-width is
/// `1.96 * sd / sqrt(E)` with the Bessel-corrected sample deviation.
pub fn summarize(method: impl Into<String>, split: impl Into<String>, correct: &[bool]) -> EvalSummary {
    let n = correct.len();
    let hits = correct.iter().filter(|&&c| c).count() as f64;
    let (accuracy, ci95) = if n == 0 {
        (0.0, 0.0)
    } else {
        let mean = hits / n as f64;
        let sd = if n > 1 {
            // sum of squared deviations of 0/1 values around the mean
            let ss = hits * (1.0 - mean).powi(2) + (n as f64 - hits) * mean.powi(2);
            (ss / (n as f64 - 1.0)).sqrt()
        } else {
            0.0
        };
        (100.0 * mean, 100.0 * 1.96 * sd / (n as f64).sqrt())
    };
    EvalSummary {
        method: method.into(),
        split: split.into(),
        episodes: n,
        accuracy,
        ci95,
    }
}

/// Per-episode correctness of a combiner on the first `episodes` episodes.
pub fn episode_correctness(
    combiner: &dyn Combiner,
    pool: &Pool,
    mask: &EnsembleMask,
    split: &str,
    episodes: usize,
) -> Result<Vec<bool>> {
    let matrices = pool.split(split)?;
    let available = matrices[0].len();
    if episodes > available {
        return Err(Error::NotEnoughEpisodes {
            requested: episodes,
            available,
        });
    }
    if mask.pool_size() != pool.n_models() || mask.size() == 0 {
        return Err(Error::InvalidMask(format!(
            "mask {mask} does not select from a pool of {}",
            pool.n_models()
        )));
    }
    let members = mask.members();
    let labels = matrices[0].labels();
    (0..episodes)
        .into_par_iter()
        .map(|e| {
            let rows: Vec<&[f64]> = members.iter().map(|&i| matrices[i].row(e)).collect();
            Ok(combiner.combine(&rows)? == labels[e])
        })
        .collect()
}

pub fn evaluate(
    combiner: &dyn Combiner,
    pool: &Pool,
    mask: &EnsembleMask,
    split: &str,
    episodes: usize,
) -> Result<EvalSummary> {
    let correct = episode_correctness(combiner, pool, mask, split, episodes)?;
    Ok(summarize(combiner.name(), split, &correct))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn plurality_examples() {
        assert_eq!(plurality_vote(&[2, 2, 4], &[0.2; 5]), 2);
        assert_eq!(plurality_vote(&[1, 3], &[0.05, 0.40, 0.05, 0.45, 0.05]), 3);
        // full tie on probabilities falls back to lowest index
        assert_eq!(plurality_vote(&[3, 1], &[0.0, 0.5, 0.0, 0.5]), 1);
        assert_eq!(plurality_vote(&[4], &[0.2; 5]), 4);
    }

    #[test]
    fn simple_mean_examples() {
        assert_eq!(simple_mean(&[&[0.7, 0.3], &[0.2, 0.8]]).unwrap(), 1);
        let row = [0.1, 0.6, 0.3];
        assert_eq!(simple_mean(&[&row, &row, &row]).unwrap(), 1);
        assert!(matches!(simple_mean(&[&[0.5, 0.6]]), Err(Error::RowNotNormalized(_))));
        // frozen from scripts/oracles.py (exact rational mean)
        let rows: [&[f64]; 3] = [
            &[0.12, 0.3, 0.08, 0.2, 0.3],
            &[0.31, 0.09, 0.2, 0.2, 0.2],
            &[0.05, 0.25, 0.4, 0.1, 0.2],
        ];
        assert_eq!(simple_mean(&rows).unwrap(), 4);
    }

    #[test]
    fn ci_closed_form() {
        let mut v = vec![true; 300];
        v.extend(vec![false; 300]);
        let s = summarize("x", "novel", &v);
        assert_eq!(s.accuracy, 50.0);
        // frozen from scripts/oracles.py (50-digit arithmetic)
        assert!((s.ci95 - 4.004_171_447_582_641).abs() < 1e-10);
        let third = summarize("x", "novel", &[true, true, true, false, false, false, false, false, false]);
        assert!((third.ci95 - 32.666_666_666_666_667).abs() < 1e-10);
        let perfect = summarize("x", "novel", &[true; 600]);
        assert_eq!((perfect.accuracy, perfect.ci95), (100.0, 0.0));
    }

    proptest! {
        #[test]
        fn simple_mean_permutation_invariant(
            raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4), 2..6),
            rot in 0usize..6
        ) {
            let probs: Vec<Vec<f64>> = raw.iter().map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(|v| v / s).collect()
            }).collect();
            let rows: Vec<&[f64]> = probs.iter().map(Vec::as_slice).collect();
            let mut rotated = rows.clone();
            rotated.rotate_left(rot % rows.len());
            let a = simple_mean(&rows).unwrap();
            let b = simple_mean(&rotated).unwrap();
            // rotation can only change the sum's rounding, so compare the means
            let mean = mean_rows(&rows);
            prop_assert!(a == b || (mean[a] - mean[b]).abs() < 1e-12);
        }
    }
}
