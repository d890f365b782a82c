use std::time::Instant;

use fusionshot::diversity::{diversity_report, focal_sigma, pruning_score, MaskScorer, Weights};
use fusionshot::mask::EnsembleMask;
use fusionshot::pruner::*;
use fusionshot::synth::{self, presets, SynthSpec, ABLATION_TRIO};
use fusionshot::Error;

fn bf() -> SearchConfig {
    SearchConfig {
        method: SearchMethod::BruteForce,
        ..SearchConfig::default()
    }
}

fn ga(seed: u64) -> SearchConfig {
    SearchConfig {
        method: SearchMethod::Genetic,
        seed,
        ..SearchConfig::default()
    }
}

#[test]
fn brute_force_visits_every_candidate() {
    for n in 2..=12 {
        let sp = synth::generate(&presets::random_pool(n, 60, n as u64)).unwrap();
        let r = brute_force(&sp.pool, &SearchConfig { record_visited: true, ..bf() }).unwrap();
        assert_eq!(r.visited_count, candidate_count(n));
        assert_eq!(r.visited.len() as u64, candidate_count(n));
        assert_eq!(r.ranked.len(), 5.min(candidate_count(n) as usize));
    }
}

#[test]
fn three_models_give_four_masks() {
    let sp = synth::generate(&presets::random_pool(3, 60, 1)).unwrap();
    let r = brute_force(&sp.pool, &SearchConfig { top_k: 10, ..bf() }).unwrap();
    let mut masks: Vec<String> = r.ranked.iter().map(|d| d.mask.to_string()).collect();
    masks.sort();
    assert_eq!(masks, ["0b011", "0b101", "0b110", "0b111"]);
}

#[test]
fn ranking_matches_independent_rescoring() {
    let sp = synth::generate(&presets::random_pool(7, 300, 21)).unwrap();
    let r = brute_force(&sp.pool, &SearchConfig { top_k: 127, ..bf() }).unwrap();
    for d in &r.ranked {
        let again = diversity_report(&sp.pool, "val", &d.mask, Weights::default()).unwrap();
        assert!((again.pruning_score - d.pruning_score).abs() < 1e-12);
        assert!((pruning_score(d.val_accuracy, d.lambda_focal, d.weights) - d.pruning_score).abs() < 1e-12);
    }
    for w in r.ranked.windows(2) {
        assert!(w[0].pruning_score >= w[1].pruning_score);
    }
}

#[test]
fn complementary_pair_is_top() {
    // m4 and m5 fail on disjoint episodes; the rest share a common latent.
    let mut spec = SynthSpec::new(vec![0.6, 0.62, 0.64, 0.66, 0.75, 0.75], 5, 600, 0.0, 3);
    spec.loadings = Some(vec![0.9, 0.9, 0.9, 0.9, 0.95, -0.95]);
    let sp = synth::generate(&spec).unwrap();
    let r = brute_force(&sp.pool, &bf()).unwrap();
    assert_eq!(r.ranked[0].mask.members(), vec![4, 5]);
}

#[test]
fn ablation_pool_ranks_the_trio_first_and_the_full_team_low() {
    let sp = synth::plant_ablation_pool(7).unwrap();
    let r = brute_force(&sp.pool, &SearchConfig { top_k: 1013, ..bf() }).unwrap();
    assert_eq!(r.ranked[0].mask.members(), ABLATION_TRIO.to_vec());
    let full = EnsembleMask::full(10).unwrap();
    let rank = r.ranked.iter().position(|d| d.mask == full).unwrap();
    assert!(rank >= 100, "full team rank {rank}");
}

#[test]
fn ga_agrees_with_brute_force_and_covers_less() {
    let mut agree = 0;
    for seed in 0..10 {
        let sp = synth::generate(&presets::random_pool(10, 300, 100 + seed)).unwrap();
        let exact = brute_force(&sp.pool, &bf()).unwrap();
        let found = genetic_search(&sp.pool, &ga(seed)).unwrap();
        assert!(found.ranked[0].pruning_score <= exact.ranked[0].pruning_score + 1e-15);
        assert!(found.visited_count <= found.candidate_count);
        assert!(found.coverage() < 1.0);
        if found.ranked[0].mask == exact.ranked[0].mask {
            agree += 1;
        }
    }
    assert!(agree >= 9, "{agree}/10");
}

#[test]
fn ga_is_deterministic() {
    let sp = synth::generate(&presets::random_pool(12, 200, 5)).unwrap();
    let a = genetic_search(&sp.pool, &ga(3)).unwrap();
    let b = genetic_search(&sp.pool, &ga(3)).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn ga_is_faster_than_brute_force_at_sixteen() {
    let sp = synth::generate(&presets::random_pool(16, 300, 2)).unwrap();
    let t = Instant::now();
    genetic_search(&sp.pool, &ga(1)).unwrap();
    let ga_time = t.elapsed();
    let t = Instant::now();
    brute_force(&sp.pool, &bf()).unwrap();
    assert!(ga_time < t.elapsed());
}

#[test]
fn selection_policies() {
    let sp = synth::generate(&presets::random_pool(6, 200, 4)).unwrap();
    let r = brute_force(&sp.pool, &bf()).unwrap();
    assert_eq!(select_ensemble(&r, SelectionPolicy::Best, 0).unwrap(), r.ranked[0].mask);
    assert_eq!(select_ensemble(&r, SelectionPolicy::RandomTopK(1), 99).unwrap(), r.ranked[0].mask);
    let pick = select_ensemble(&r, SelectionPolicy::RandomTopK(5), 42).unwrap();
    assert_eq!(select_ensemble(&r, SelectionPolicy::RandomTopK(5), 42).unwrap(), pick);
    assert!(r.ranked.iter().any(|d| d.mask == pick));
    let empty = SearchResult { ranked: vec![], ..r };
    assert!(matches!(select_ensemble(&empty, SelectionPolicy::Best, 0), Err(Error::EmptyResult)));
}

#[test]
fn defense_candidates_contain_the_victim() {
    let sp = synth::generate(&presets::random_pool(4, 200, 6)).unwrap();
    let r = defense_search(&sp.pool, &SearchConfig { top_k: 20, ..bf() }, "m0").unwrap();
    assert_eq!(r.candidate_count, 7);
    assert_eq!(r.visited_count, 7);
    assert!(r.ranked.iter().all(|d| d.mask.contains(0)));
    assert!(matches!(defense_search(&sp.pool, &bf(), "nobody"), Err(Error::VictimNotInPool(_))));
}

#[test]
fn defense_prefers_the_anti_correlated_partner() {
    for seed in 0..5 {
        let sp = synth::generate(&presets::victim_partner(seed)).unwrap();
        let r = defense_search(&sp.pool, &bf(), "m0").unwrap();
        let top = r.ranked[0].mask;
        assert!(top.contains(0) && top.contains(3), "seed {seed}: {top}");
        // victim sigma drives the diversity term
        let corr = sp.pool.correctness("val").unwrap();
        let sigma = focal_sigma(&corr, &top, 0).unwrap();
        assert!((r.ranked[0].victim_sigma.unwrap() - sigma).abs() < 1e-12);
    }
}

#[test]
fn scorer_plurality_matches_consensus_evaluate() {
    use fusionshot::consensus::{evaluate, Plurality};
    let sp = synth::generate(&presets::random_pool(6, 300, 8)).unwrap();
    let scorer = MaskScorer::new(&sp.pool, "val").unwrap();
    for bits in [0b11u64, 0b10101, 0b111111, 0b110110] {
        let mask = EnsembleMask::new(bits, 6).unwrap();
        let a = scorer.plurality_accuracy(&mask.members());
        let e = evaluate(&Plurality, &sp.pool, &mask, "val", 300).unwrap();
        assert!((100.0 * a - e.accuracy).abs() < 1e-9);
    }
}
