//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fail.
//!
//! Runs as a plain binary (no libtest harness) so the lines are always shown.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use fusionshot::consensus::{evaluate, plurality_vote, summarize, Plurality, SimpleMean};
use fusionshot::diversity::{focal_sigma, sigma_from_counts};
use fusionshot::fusion::{gradient_check, predict_eval, stream_adapt, train, FusionParams, InputNormalization, StreamConfig, TrainConfig};
use fusionshot::pruner::{brute_force, candidate_count, defense_search, genetic_search, SearchConfig, SearchMethod};
use fusionshot::synth::{self, presets, ABLATION_TRIO};
use fusionshot::{CorrectnessMatrix, EnsembleMask};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

// Tolerances and thresholds.
const SIGMA_TOL: f64 = 1e-12;
const SIGMA_CASES: usize = 1000;
const COUNT_BUDGET: Duration = Duration::from_millis(1);
const GA_AGREE_MIN: usize = 19;
const GA_BF_SEEDS: u64 = 20;
const FUSION_SEEDS: u64 = 20;
const FUSION_MARGIN: f64 = 2.0;
const FUSION_MARGIN_MIN: usize = 16;
const GRAD_DRAWS: u64 = 20;
const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
const CI_EXPECTED: f64 = 4.0042;
const STREAM_SEEDS: u64 = 20;
const STREAM_SWITCH: usize = 5;
const STREAM_WINDOW: usize = 3;
const STREAM_GAP: f64 = 5.0;
const STREAM_MIN: usize = 18;
const RERUNS: usize = 3;
const DEFENSE_SEEDS: u64 = 10;
const W1: f64 = 0.6;
const W2: f64 = 0.4;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn bf() -> SearchConfig {
    SearchConfig { method: SearchMethod::BruteForce, ..SearchConfig::default() }
}

fn ga(seed: u64) -> SearchConfig {
    SearchConfig { method: SearchMethod::Genetic, seed, ..SearchConfig::default() }
}

fn c1_candidate_counts() -> Verdict {
    let t = Instant::now();
    let got = [candidate_count(5), candidate_count(10), candidate_count(20)];
    let elapsed = t.elapsed();
    verdict(
        got == [26, 1013, 1_048_555] && elapsed < COUNT_BUDGET,
        format!("counts {got:?} in {elapsed:?}"),
    )
}

/// Random correctness rows for `m` models over `e` episodes, built episode by
/// episode from `fail_set`, which returns the failing members of one episode.
fn matrix(m: usize, e: usize, mut fail_set: impl FnMut(usize) -> Vec<usize>) -> CorrectnessMatrix {
    let mut rows = vec![vec![true; e]; m];
    for ep in 0..e {
        for i in fail_set(ep) {
            let row: &mut Vec<bool> = &mut rows[i];
            row[ep] = false;
        }
    }
    CorrectnessMatrix { split: "val".into(), rows }
}

fn c2_sigma_boundaries() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bad = Vec::new();
    for case in 0..SIGMA_CASES {
        let m = rng.random_range(2..=8);
        let e = rng.random_range(5..60);
        let mask = EnsembleMask::full(m).unwrap();
        let focal = rng.random_range(0..m);

        // at most one member fails per episode; the focal fails on episode 0
        let disjoint = matrix(m, e, |ep| {
            if ep == 0 {
                vec![focal]
            } else if rng.random::<f64>() < 0.5 {
                vec![rng.random_range(0..m)]
            } else {
                vec![]
            }
        });
        // everyone fails together or nobody does
        let joint = matrix(m, e, |ep| if ep == 0 || rng.random::<f64>() < 0.3 { (0..m).collect() } else { vec![] });
        // the focal shares at least one failure with someone else
        let other = (focal + 1) % m;
        let shared = matrix(m, e, |ep| {
            if ep == 0 {
                vec![focal, other]
            } else {
                (0..m).filter(|_| rng.random::<f64>() < 0.3).collect()
            }
        });

        let one = focal_sigma(&disjoint, &mask, focal).unwrap();
        let zero = focal_sigma(&joint, &mask, focal).unwrap();
        let below = focal_sigma(&shared, &mask, focal).unwrap();
        if (one - 1.0).abs() > SIGMA_TOL || zero.abs() > SIGMA_TOL || below >= 1.0 - SIGMA_TOL {
            bad.push((case, one, zero, below));
        }
    }
    verdict(bad.is_empty(), format!("{} cases x 3 families, failures {:?}", SIGMA_CASES, &bad[..bad.len().min(3)]))
}

fn c3_sigma_scaling() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..SIGMA_CASES {
        let m = rng.random_range(2..=12);
        let mut counts: Vec<u64> = (0..m).map(|_| rng.random_range(0..50)).collect();
        counts[rng.random_range(0..m)] += 1;
        let c = rng.random_range(1..=1_000_000u64);
        let scaled: Vec<u64> = counts.iter().map(|n| n * c).collect();
        let a = sigma_from_counts(&counts).unwrap();
        let b = sigma_from_counts(&scaled).unwrap();
        worst = worst.max((a - b).abs());
    }
    verdict(worst <= SIGMA_TOL, format!("{SIGMA_CASES} histograms, max |diff| {worst:.3e}"))
}

fn c4_ga_vs_bf() -> Verdict {
    let agree = (0..GA_BF_SEEDS)
        .filter(|&seed| {
            let sp = synth::generate(&presets::random_pool(10, 300, 1000 + seed)).unwrap();
            let exact = brute_force(&sp.pool, &bf()).unwrap();
            let found = genetic_search(&sp.pool, &ga(seed)).unwrap();
            found.ranked[0].mask == exact.ranked[0].mask
        })
        .count();
    let sp = synth::generate(&presets::random_pool(20, 300, 2020)).unwrap();
    let t = Instant::now();
    let found = genetic_search(&sp.pool, &ga(1)).unwrap();
    let ga_time = t.elapsed();
    let t = Instant::now();
    let exact = brute_force(&sp.pool, &bf()).unwrap();
    let bf_time = t.elapsed();
    verdict(
        agree >= GA_AGREE_MIN && ga_time < bf_time,
        format!(
            "N=10 top-1 agreement {agree}/{GA_BF_SEEDS} (need {GA_AGREE_MIN}); N=20 GA {ga_time:.2?} vs BF {bf_time:.2?}, \
             GA top-1 {} BF top-1 {}",
            found.ranked[0].mask, exact.ranked[0].mask
        ),
    )
}

fn c5_ablation() -> Verdict {
    let sp = synth::plant_ablation_pool(5).unwrap();
    let r = brute_force(&sp.pool, &bf()).unwrap();
    let top = r.ranked[0].mask;
    let full = EnsembleMask::full(10).unwrap();
    let top_acc = evaluate(&Plurality, &sp.pool, &top, "novel", 600).unwrap().accuracy;
    let full_acc = evaluate(&Plurality, &sp.pool, &full, "novel", 600).unwrap().accuracy;
    verdict(
        top_acc > full_acc,
        format!(
            "top-1 {top} (planted trio {ABLATION_TRIO:?}) plurality {top_acc:.2}% vs all-10 {full_acc:.2}%"
        ),
    )
}

fn c6_fusion() -> Verdict {
    let rows: Vec<(f64, f64, f64)> = (0..FUSION_SEEDS)
        .into_par_iter()
        .map(|seed| {
            let sp = synth::generate(&presets::complementary(seed)).unwrap();
            let mask = EnsembleMask::full(3).unwrap();
            let cfg = TrainConfig { seed, ..TrainConfig::default() };
            let params = train(&sp.pool, &mask, &cfg).unwrap().params;
            let fusion = predict_eval(&params, &sp.pool, &mask, "novel", 600).unwrap().accuracy;
            let plurality = evaluate(&Plurality, &sp.pool, &mask, "novel", 600).unwrap().accuracy;
            let mean = evaluate(&SimpleMean, &sp.pool, &mask, "novel", 600).unwrap().accuracy;
            (fusion, plurality, mean)
        })
        .collect();
    let n = rows.len() as f64;
    let avg = |f: fn(&(f64, f64, f64)) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let (fusion, plurality, mean) = (avg(|r| r.0), avg(|r| r.1), avg(|r| r.2));
    let margin = rows.iter().filter(|r| r.0 - r.2 >= FUSION_MARGIN).count();
    verdict(
        fusion >= plurality && fusion >= mean && margin >= FUSION_MARGIN_MIN,
        format!(
            "mean over {FUSION_SEEDS} seeds: fusion {fusion:.2}% plurality {plurality:.2}% mean {mean:.2}%; \
             fusion - mean >= {FUSION_MARGIN} on {margin}/{FUSION_SEEDS} (need {FUSION_MARGIN_MIN})"
        ),
    )
}

fn c7_gradients() -> Verdict {
    let mut worst: f64 = 0.0;
    for seed in 0..GRAD_DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let m = rng.random_range(2..5);
        let k = rng.random_range(2..7);
        let hidden = [rng.random_range(3..12), rng.random_range(3..12)];
        let params = FusionParams::init(EnsembleMask::full(m).unwrap(), k, &hidden, InputNormalization::Raw, seed);
        let x = Array2::from_shape_simple_fn((8, m * k), || rng.random_range(-2.0..2.0));
        let y: Vec<usize> = (0..8).map(|_| rng.random_range(0..k)).collect();
        worst = worst.max(gradient_check(&params, x.view(), &y, GRAD_STEP).max_relative_error);
    }
    verdict(worst <= GRAD_TOL, format!("{GRAD_DRAWS} draws, max relative error {worst:.3e} (tol {GRAD_TOL:e})"))
}

fn c8_interval() -> Verdict {
    let correct: Vec<bool> = (0..600).map(|e| e < 300).collect();
    let s = summarize("plurality", "novel", &correct);
    let rounded = (s.ci95 * 1e4).round() / 1e4;
    verdict(
        s.accuracy == 50.0 && rounded == CI_EXPECTED,
        format!("accuracy {:.2}%, ci95 {:.4} (expected {CI_EXPECTED})", s.accuracy, s.ci95),
    )
}

fn c9_stream() -> Verdict {
    let recovered: Vec<bool> = (0..STREAM_SEEDS)
        .into_par_iter()
        .map(|seed| {
            let spec = presets::domain_switch(seed, STREAM_SWITCH);
            let batches: Vec<_> = synth::generate_stream(&spec).unwrap().into_iter().map(|s| s.pool).collect();
            let cfg = StreamConfig::default();
            let trace = stream_adapt(&batches, &EnsembleMask::full(5).unwrap(), &cfg, None).unwrap();
            trace.batches[STREAM_SWITCH..=STREAM_SWITCH + STREAM_WINDOW]
                .iter()
                .any(|b| b.summary.accuracy >= b.best_member_accuracy - STREAM_GAP)
        })
        .collect();
    let n = recovered.iter().filter(|&&r| r).count();
    verdict(
        n >= STREAM_MIN,
        format!("recovered within {STREAM_WINDOW} batches of the switch on {n}/{STREAM_SEEDS} seeds (need {STREAM_MIN})"),
    )
}

fn cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fusionshot"))
        .current_dir(dir)
        .env_remove("FUSIONSHOT_THREADS")
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

/// Runs every pipeline stage once in `dir`, writing each report to a file.
fn pipeline(dir: &Path) -> Result<(), String> {
    fs::write(
        dir.join("spec.json"),
        r#"{"n_models": 5, "k": 5, "episodes": {"train": 600, "val": 300, "novel": 600},
            "accuracies": [0.55, 0.6, 0.65, 0.7, 0.75], "rho": 0.3, "seed": 11}"#,
    )
    .unwrap();
    fs::write(
        dir.join("stream_spec.json"),
        r#"{"n_models": 3, "k": 5, "accuracies": [0.5, 0.5, 0.5], "rho": 0.2, "seed": 12,
            "regimes": {"experts": [0], "expert_accuracy": 0.9, "expert_margin": 3.0},
            "switches": [{"batch": 2, "plan": {"experts": [2], "expert_accuracy": 0.9, "expert_margin": 3.0}}],
            "stream": {"batches": 3, "episodes_per_batch": 300}}"#,
    )
    .unwrap();
    let m = "pool/manifest.json";
    let steps: Vec<Vec<&str>> = vec![
        vec!["synth", "--spec", "spec.json", "--out-dir", "pool", "--out", "r_synth.json"],
        vec!["synth", "--spec", "stream_spec.json", "--out-dir", "stream", "--out", "r_synth_stream.json"],
        vec!["ingest", "--manifest", m, "--out", "r_ingest.json"],
        vec!["diversity", "--manifest", m, "--mask", "0b10110", "--out", "r_diversity.json"],
        vec!["prune", "--manifest", m, "--method", "bf", "--record-visited", "--out", "r_bf.json"],
        vec!["prune", "--manifest", m, "--method", "ga", "--seed", "3", "--out", "r_ga.json"],
        vec!["prune", "--manifest", m, "--method", "bf", "--victim", "m1", "--out", "r_defense.json"],
        vec!["train", "--manifest", m, "--mask", "0b10110", "--max-epochs", "15", "--out", "params.json", "--report-out", "r_train.json"],
        vec!["eval", "--manifest", m, "--mask", "0b10110", "--combiner", "plurality", "--csv", "eval.csv", "--out", "r_plurality.json"],
        vec!["eval", "--manifest", m, "--mask", "0b10110", "--combiner", "mean", "--csv", "eval.csv", "--out", "r_mean.json"],
        vec!["eval", "--manifest", m, "--mask", "0b10110", "--combiner", "fusion", "--params", "params.json", "--csv", "eval.csv", "--out", "r_fusion.json"],
        vec![
            "stream", "--manifest-list", "stream/batch_000/manifest.json,stream/batch_001/manifest.json,stream/batch_002/manifest.json",
            "--train-episodes", "200", "--val-episodes", "50", "--test-episodes", "50", "--max-epochs", "5", "--out", "r_stream.json",
        ],
        vec!["export", "--input", "r_bf.json", "--kind", "diversity_scatter", "--csv", "scatter.csv", "--out", "r_export1.json"],
        vec!["export", "--input", "r_stream.json", "--kind", "stream_trace", "--csv", "trace.csv", "--out", "r_export2.json"],
        vec!["export", "--input", "r_plurality.json,r_mean.json,r_fusion.json", "--kind", "error_bars", "--csv", "bars.csv", "--out", "r_export3.json"],
    ];
    for step in &steps {
        cli(dir, step)?;
    }
    Ok(())
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                files.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    files
}

const REPORTS: [&str; 15] = [
    "r_synth.json", "r_synth_stream.json", "r_ingest.json", "r_diversity.json", "r_bf.json", "r_ga.json",
    "r_defense.json", "r_train.json", "r_plurality.json", "r_mean.json", "r_fusion.json", "r_stream.json",
    "r_export1.json", "r_export2.json", "r_export3.json",
];

fn c10_determinism() -> Verdict {
    let mut trees = Vec::new();
    for _ in 0..RERUNS {
        let dir = tempfile::tempdir().unwrap();
        if let Err(e) = pipeline(dir.path()) {
            return verdict(false, e);
        }
        trees.push(tree(dir.path()));
    }
    let missing: Vec<&str> = REPORTS.iter().copied().filter(|r| !trees[0].contains_key(*r)).collect();
    let same = trees.windows(2).all(|w| w[0] == w[1]);
    verdict(
        same && missing.is_empty(),
        format!(
            "{RERUNS} reruns of {} stages, {} files byte-identical: {same}; missing reports {missing:?}",
            REPORTS.len(),
            trees[0].len()
        ),
    )
}

fn c11_plurality() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = 0;
    for code in 0..5usize.pow(5) {
        let votes: Vec<usize> = (0..5).map(|i| code / 5usize.pow(i) % 5).collect();
        // every fifth case has fully tied mean probabilities
        let probs: Vec<f64> = if code % 5 == 0 { vec![0.2; 5] } else { (0..5).map(|_| rng.random::<f64>()).collect() };
        let mut counts = [0usize; 5];
        for &v in &votes {
            counts[v] += 1;
        }
        let top = *counts.iter().max().unwrap();
        let mut expected = None;
        for c in 0..5 {
            if counts[c] == top && expected.is_none_or(|b: usize| probs[c] > probs[b]) {
                expected = Some(c);
            }
        }
        if plurality_vote(&votes, &probs) != expected.unwrap() {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("{} vote vectors, {mismatches} mismatches", 5usize.pow(5)))
}

/// Exhaustive oracle over victim-containing masks, scored without the pruner.
fn defense_oracle(pool: &fusionshot::Pool, victim: usize) -> EnsembleMask {
    let corr = pool.correctness("val").unwrap();
    let n = corr.n_models();
    let episodes = corr.rows[0].len();
    let mut best: Option<(f64, usize, Vec<usize>, EnsembleMask)> = None;
    for bits in 1u64..(1 << n) {
        if bits.count_ones() < 2 || bits >> victim & 1 == 0 {
            continue;
        }
        let mask = EnsembleMask::new(bits, n).unwrap();
        let members = mask.members();
        let m = members.len() as f64;
        let mut both = 0.0;
        let mut one = 0.0;
        let mut total = 0.0;
        for e in 0..episodes {
            if corr.rows[victim][e] {
                continue;
            }
            let j = members.iter().filter(|&&i| !corr.rows[i][e]).count() as f64;
            both += j * (j - 1.0) / (m * (m - 1.0));
            one += j / m;
            total += 1.0;
        }
        let sigma = if total == 0.0 { 1.0 } else { 1.0 - both / one };
        let acc = evaluate(&Plurality, pool, &mask, "val", episodes).unwrap().accuracy / 100.0;
        let score = W1 * acc + W2 * sigma;
        let better = match &best {
            None => true,
            Some((s, size, mem, _)) => {
                score > *s + 1e-12 || ((score - s).abs() <= 1e-12 && (members.len(), &members) < (*size, mem))
            }
        };
        if better {
            best = Some((score, members.len(), members, mask));
        }
    }
    best.unwrap().3
}

fn c12_defense() -> Verdict {
    let mut bf_hits = 0;
    let mut ga_hits = 0;
    let mut partner = 0;
    for seed in 0..DEFENSE_SEEDS {
        let sp = synth::generate(&presets::victim_partner(seed)).unwrap();
        let oracle = defense_oracle(&sp.pool, 0);
        let exact = defense_search(&sp.pool, &bf(), "m0").unwrap().ranked[0].mask;
        let found = defense_search(&sp.pool, &ga(seed), "m0").unwrap().ranked[0].mask;
        bf_hits += usize::from(exact == oracle);
        ga_hits += usize::from(found == oracle);
        partner += usize::from(exact.contains(3));
    }
    let all = DEFENSE_SEEDS as usize;
    verdict(
        bf_hits == all && ga_hits == all && partner == all,
        format!(
            "top-1 equals exhaustive oracle: BF {bf_hits}/{all}, GA {ga_hits}/{all}; anti-correlated partner kept {partner}/{all}"
        ),
    )
}

/// Name, check, and wall-time budget (if any).
type Criterion = (&'static str, fn() -> Verdict, Option<Duration>);

const MINUTE: Duration = Duration::from_secs(60);

fn main() {
    let criteria: [Criterion; 12] = [
        ("candidate counts", c1_candidate_counts, None),
        ("sigma boundary laws", c2_sigma_boundaries, None),
        ("sigma scale invariance", c3_sigma_scaling, None),
        ("GA matches BF, faster at N=20", c4_ga_vs_bf, Some(5 * MINUTE)),
        ("ablation top-1 beats full team", c5_ablation, Some(MINUTE)),
        ("fusion beats consensus", c6_fusion, Some(10 * MINUTE)),
        ("analytic gradients", c7_gradients, Some(MINUTE)),
        ("300/600 interval", c8_interval, None),
        ("stream recovery", c9_stream, Some(10 * MINUTE)),
        ("byte-identical reruns", c10_determinism, None),
        ("plurality enumeration", c11_plurality, None),
        ("defense vs exhaustive oracle", c12_defense, Some(MINUTE)),
    ];
    // ACCEPTANCE_ONLY=<n> runs a single criterion.
    let only = std::env::var("ACCEPTANCE_ONLY").ok();
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| *o != (i + 1).to_string()) {
            continue;
        }
        let t = Instant::now();
        let mut v = check();
        let elapsed = t.elapsed();
        if let Some(budget) = budget {
            if elapsed > *budget {
                v.pass = false;
                v.detail.push_str(&format!("; over budget {budget:?}"));
            }
        }
        let tag = if v.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!v.pass);
        println!("{tag} {:>2} {name}: {} [{elapsed:.1?}]", i + 1, v.detail);
    }
    println!("acceptance: {failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
