//! Search over candidate ensembles of size 2..=N.
//!
//! Both searches rank by the pruning score with the same total order (score
//! descending, then fewer members, then lexicographically smaller member
//! list), so results never depend on evaluation order.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diversity::{pruning_score, CandidateScore, DiversityReport, MaskScorer, Weights};
use crate::error::{Error, Result};
use crate::logitstore::{Pool, VAL};
use crate::mask::{low_bits, rank_order, EnsembleMask, MAX_POOL};

/// Number of ensembles of size at least two: `2^N - N - 1`.
pub fn candidate_count(n: usize) -> u64 {
    assert!((2..=MAX_POOL).contains(&n), "pool size {n} outside 2..={MAX_POOL}");
    (1u64 << n) - n as u64 - 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMethod {
    BruteForce,
    Genetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    pub population_size: usize,
    /// Fraction of each population kept as parents for the next one.
    pub elite_fraction: f64,
    /// Per-bit flip probability; `None` means `1/N`.
    pub mutation_rate: Option<f64>,
    pub plateau_generations: usize,
    pub max_generations: usize,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population_size: 64,
            elite_fraction: 0.5,
            mutation_rate: None,
            plateau_generations: 100,
            max_generations: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub method: SearchMethod,
    pub weights: Weights,
    pub top_k: usize,
    pub seed: u64,
    pub ga: GaConfig,
    /// Split the candidates are scored on.
    pub split: String,
    /// Keep every visited candidate in the result (scatter/coverage exports).
    pub record_visited: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            method: SearchMethod::Genetic,
            weights: Weights::default(),
            top_k: 5,
            seed: 7,
            ga: GaConfig::default(),
            split: VAL.to_string(),
            record_visited: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        Weights::new(self.weights.w1, self.weights.w2)?;
        if self.top_k == 0 {
            return Err(Error::InvalidConfig("top_k must be at least 1".into()));
        }
        let ga = &self.ga;
        if ga.population_size < 2 {
            return Err(Error::InvalidConfig("GA population must be at least 2".into()));
        }
        if !(ga.elite_fraction > 0.0 && ga.elite_fraction <= 1.0) {
            return Err(Error::InvalidConfig("elite fraction must lie in (0, 1]".into()));
        }
        if let Some(rate) = ga.mutation_rate {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::InvalidConfig("mutation rate must lie in [0, 1]".into()));
            }
        }
        if ga.plateau_generations == 0 || ga.max_generations == 0 {
            return Err(Error::InvalidConfig("generation limits must be positive".into()));
        }
        Ok(())
    }
}

/// One scored candidate, as recorded for scatter plots and coverage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitedCandidate {
    pub mask: EnsembleMask,
    pub size: usize,
    /// lambda (or the victim's sigma in defense mode).
    pub diversity: f64,
    pub accuracy: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub method: SearchMethod,
    pub split: String,
    pub ranked: Vec<DiversityReport>,
    pub visited_count: u64,
    pub candidate_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generations_run: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub victim: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub visited: Vec<VisitedCandidate>,
}

impl SearchResult {
    pub fn coverage(&self) -> f64 {
        self.visited_count as f64 / self.candidate_count as f64
    }

    pub fn best(&self) -> Option<&DiversityReport> {
        self.ranked.first()
    }
}

#[derive(Clone, Copy)]
struct Scored {
    mask: EnsembleMask,
    score: f64,
    cand: CandidateScore,
}

fn by_rank(a: &Scored, b: &Scored) -> std::cmp::Ordering {
    rank_order(a.score, &a.mask, b.score, &b.mask)
}

/// Keeps the best `k` entries under the ranking order.
fn push_top(top: &mut Vec<Scored>, item: Scored, k: usize) {
    if top.len() == k && by_rank(&item, top.last().unwrap()).is_ge() {
        return;
    }
    let pos = top.partition_point(|t| by_rank(t, &item).is_lt());
    top.insert(pos, item);
    top.truncate(k);
}

fn merge_top(mut a: Vec<Scored>, b: Vec<Scored>, k: usize) -> Vec<Scored> {
    for item in b {
        push_top(&mut a, item, k);
    }
    a
}

/// Scoring context: plain focal diversity or victim-as-focal.
struct Objective<'a> {
    scorer: &'a MaskScorer,
    weights: Weights,
    victim: Option<usize>,
}

impl Objective<'_> {
    fn evaluate(&self, mask: EnsembleMask) -> Scored {
        let cand = match self.victim {
            Some(v) => self.scorer.score_victim(&mask, v),
            None => self.scorer.score(&mask),
        };
        Scored {
            mask,
            score: pruning_score(cand.accuracy, cand.diversity, self.weights),
            cand,
        }
    }

    fn finish(
        &self,
        method: SearchMethod,
        top: Vec<Scored>,
        visited_count: u64,
        candidate_count: u64,
        generations_run: Option<usize>,
        visited: Vec<Scored>,
    ) -> Result<SearchResult> {
        let ranked = top
            .iter()
            .map(|s| self.scorer.report(&s.mask, self.weights, self.victim, false))
            .collect::<Result<Vec<_>>>()?;
        Ok(SearchResult {
            method,
            split: self.scorer.split().to_string(),
            ranked,
            visited_count,
            candidate_count,
            generations_run,
            victim: self.victim.map(|v| self.scorer.model_ids()[v].clone()),
            visited: visited
                .into_iter()
                .map(|s| VisitedCandidate {
                    mask: s.mask,
                    size: s.mask.size(),
                    diversity: s.cand.diversity,
                    accuracy: s.cand.accuracy,
                    score: s.score,
                })
                .collect(),
        })
    }
}

fn victim_candidates(n: usize) -> u64 {
    (1u64 << (n - 1)) - 1
}

fn run_brute_force(obj: &Objective, n: usize, config: &SearchConfig) -> Result<SearchResult> {
    let required = obj.victim.map_or(0, |v| 1u64 << v);
    let valid = |bits: &u64| bits.count_ones() >= 2 && bits & required == required;
    let k = config.top_k;
    let all = 0..=low_bits(n);
    let top = all
        .clone()
        .into_par_iter()
        .filter(valid)
        .fold(Vec::new, |mut top, bits| {
            let mask = EnsembleMask::new(bits, n).expect("enumerated masks are valid");
            push_top(&mut top, obj.evaluate(mask), k);
            top
        })
        .reduce(Vec::new, |a, b| merge_top(a, b, k));
    let visited_count = all.clone().filter(valid).count() as u64;
    let visited = if config.record_visited {
        all.into_par_iter()
            .filter(valid)
            .map(|bits| obj.evaluate(EnsembleMask::new(bits, n).expect("valid")))
            .collect()
    } else {
        Vec::new()
    };
    let candidates = if obj.victim.is_some() { victim_candidates(n) } else { candidate_count(n) };
    obj.finish(SearchMethod::BruteForce, top, visited_count, candidates, None, visited)
}

fn repair(bits: u64, n: usize, required: u64, rng: &mut ChaCha8Rng) -> u64 {
    let mut bits = (bits | required) & low_bits(n);
    while bits.count_ones() < 2 {
        bits |= 1 << rng.random_range(0..n);
    }
    bits
}

fn run_genetic(obj: &Objective, n: usize, config: &SearchConfig) -> Result<SearchResult> {
    let ga = &config.ga;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let required = obj.victim.map_or(0, |v| 1u64 << v);
    let rate = ga.mutation_rate.unwrap_or(1.0 / n as f64);
    let elites = ((ga.population_size as f64 * ga.elite_fraction).ceil() as usize).clamp(2, ga.population_size);

    let mut population: Vec<u64> = (0..ga.population_size)
        .map(|_| {
            let bits = rng.random::<u64>() & low_bits(n);
            repair(bits, n, required, &mut rng)
        })
        .collect();

    // distinct masks evaluated so far, with insertion order for determinism
    let mut cache: HashMap<u64, usize> = HashMap::new();
    let mut evaluated: Vec<Scored> = Vec::new();
    let mut best: Option<Scored> = None;
    let mut stall = 0usize;
    let mut generations = 0usize;

    while generations < ga.max_generations {
        generations += 1;
        let mut fresh: Vec<u64> = Vec::new();
        for &bits in &population {
            if !cache.contains_key(&bits) && !fresh.contains(&bits) {
                fresh.push(bits);
            }
        }
        let scored: Vec<Scored> = fresh
            .par_iter()
            .map(|&bits| obj.evaluate(EnsembleMask::new(bits, n).expect("repaired masks are valid")))
            .collect();
        for s in scored {
            cache.insert(s.mask.bits(), evaluated.len());
            evaluated.push(s);
        }

        let gen_best = population
            .iter()
            .map(|b| evaluated[cache[b]])
            .min_by(by_rank)
            .expect("population is non-empty");
        match best {
            Some(b) if gen_best.score <= b.score => stall += 1,
            _ => stall = 0,
        }
        if best.is_none_or(|b| by_rank(&gen_best, &b).is_lt()) {
            best = Some(gen_best);
        }
        if stall >= ga.plateau_generations {
            break;
        }

        // truncation selection: the fittest part of the population survives
        let mut ordered: Vec<Scored> = population.iter().map(|b| evaluated[cache[b]]).collect();
        ordered.sort_by(by_rank);
        let parents: Vec<u64> = ordered[..elites].iter().map(|s| s.mask.bits()).collect();
        let mut next = parents.clone();
        while next.len() < ga.population_size {
            let a = parents[rng.random_range(0..parents.len())];
            let b = parents[rng.random_range(0..parents.len())];
            let point = if n > 1 { rng.random_range(1..n) } else { 0 };
            let low = low_bits(point);
            let mut child = (a & low) | (b & !low);
            for bit in 0..n {
                if rng.random::<f64>() < rate {
                    child ^= 1 << bit;
                }
            }
            next.push(repair(child, n, required, &mut rng));
        }
        population = next;
    }

    let k = config.top_k;
    let mut top = Vec::with_capacity(k + 1);
    for s in &evaluated {
        push_top(&mut top, *s, k);
    }
    let visited_count = evaluated.len() as u64;
    let visited = if config.record_visited { evaluated } else { Vec::new() };
    let candidates = if obj.victim.is_some() { victim_candidates(n) } else { candidate_count(n) };
    obj.finish(SearchMethod::Genetic, top, visited_count, candidates, Some(generations), visited)
}

fn run(pool: &Pool, config: &SearchConfig, victim: Option<usize>) -> Result<SearchResult> {
    config.validate()?;
    let scorer = MaskScorer::new(pool, &config.split)?;
    let obj = Objective {
        scorer: &scorer,
        weights: config.weights,
        victim,
    };
    let n = pool.n_models();
    match config.method {
        SearchMethod::BruteForce => run_brute_force(&obj, n, config),
        SearchMethod::Genetic => run_genetic(&obj, n, config),
    }
}

/// Scores every candidate ensemble.
pub fn brute_force(pool: &Pool, config: &SearchConfig) -> Result<SearchResult> {
    run(pool, &SearchConfig { method: SearchMethod::BruteForce, ..config.clone() }, None)
}

/// Genetic search; deterministic for a fixed seed.
pub fn genetic_search(pool: &Pool, config: &SearchConfig) -> Result<SearchResult> {
    run(pool, &SearchConfig { method: SearchMethod::Genetic, ..config.clone() }, None)
}

/// Runs whichever method the config names.
pub fn search(pool: &Pool, config: &SearchConfig) -> Result<SearchResult> {
    run(pool, config, None)
}

/// Searches only ensembles containing `victim`, with the victim's focal
/// negative correlation as the diversity term.
pub fn defense_search(pool: &Pool, config: &SearchConfig, victim: &str) -> Result<SearchResult> {
    let v = pool
        .model_index(victim)
        .ok_or_else(|| Error::VictimNotInPool(victim.to_string()))?;
    run(pool, config, Some(v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    Best,
    RandomTopK(usize),
}

pub fn select_ensemble(result: &SearchResult, policy: SelectionPolicy, seed: u64) -> Result<EnsembleMask> {
    if result.ranked.is_empty() {
        return Err(Error::EmptyResult);
    }
    match policy {
        SelectionPolicy::Best => Ok(result.ranked[0].mask),
        SelectionPolicy::RandomTopK(k) => {
            let pool = k.clamp(1, result.ranked.len());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(result.ranked[rng.random_range(0..pool)].mask)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn candidate_counts() {
        assert_eq!(candidate_count(4), 11);
        assert_eq!(candidate_count(5), 26);
        assert_eq!(candidate_count(10), 1013);
        assert_eq!(candidate_count(20), 1_048_555);
        for n in 2..40 {
            assert!(candidate_count(n + 1) > 2 * candidate_count(n));
        }
        assert_eq!(victim_candidates(4), 7);
    }

    fn scored(bits: u64, score: f64) -> Scored {
        Scored {
            mask: EnsembleMask::new(bits, 6).unwrap(),
            score,
            cand: CandidateScore { accuracy: 0.0, diversity: 0.0 },
        }
    }

    #[test]
    fn top_k_is_total_order() {
        let items = [
            scored(0b000011, 0.5),
            scored(0b000111, 0.9),
            scored(0b001100, 0.9),
            scored(0b000101, 0.9),
            scored(0b110000, 0.1),
        ];
        let mut top = Vec::new();
        for s in items {
            push_top(&mut top, s, 3);
        }
        let order: Vec<u64> = top.iter().map(|s| s.mask.bits()).collect();
        // equal scores: pairs before triples, then lexicographic members
        assert_eq!(order, vec![0b000101, 0b001100, 0b000111]);
        let mut rev = Vec::new();
        for s in items.iter().rev() {
            push_top(&mut rev, *s, 3);
        }
        assert_eq!(rev.iter().map(|s| s.mask.bits()).collect::<Vec<_>>(), order);
    }

    #[test]
    fn repair_keeps_required_and_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for bits in [0u64, 1, 0b1000] {
            let r = repair(bits, 5, 0b100, &mut rng);
            assert!(r.count_ones() >= 2);
            assert!(r & 0b100 != 0);
            assert_eq!(r >> 5, 0);
        }
    }
}
