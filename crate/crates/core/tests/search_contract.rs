mod common;

use common::{landscape, seeded_landscape_seeds};
use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use fedsel_core::rng::SimRng;
use fedsel_core::search::{
    append_record, genetic_search, hash_config, mutate, reference_search, sample_uniform, Archive,
    EvalOutcome, GeneticOptions, SearchHooks,
};
use fedsel_core::strategies::{default_schema, validate_config, ParamValue, StrategyConfig, StrategyName};
use proptest::prelude::*;
use rand::SeedableRng;

fn options(seed: u64) -> GeneticOptions {
    GeneticOptions { seed, ..GeneticOptions::default() }
}

#[test]
fn distinct_configs_never_share_a_hash() {
    let schema = default_schema();
    let mut rng = SimRng::seed_from_u64(1);
    let mut by_hash: HashMap<String, String> = HashMap::new();
    for _ in 0..10_000 {
        let c = sample_uniform(&schema, 10, &mut rng).unwrap();
        let json = c.to_canonical_json();
        let prev = by_hash.entry(hash_config(&c)).or_insert_with(|| json.clone());
        assert_eq!(*prev, json);
    }
}

#[test]
fn strategy_frequencies_are_uniform() {
    let schema = default_schema();
    let mut rng = SimRng::seed_from_u64(2);
    let mut counts: HashMap<StrategyName, usize> = HashMap::new();
    for _ in 0..10_000 {
        let c = sample_uniform(&schema, 4, &mut rng).unwrap();
        assert!(validate_config(&c.to_raw(), &schema, 4).is_ok());
        if let Some(ParamValue::Int(f)) = c.get("num_malicious_clients") {
            assert!(f <= 1);
        }
        *counts.entry(c.name()).or_default() += 1;
    }
    assert_eq!(counts.len(), 5);
    for (name, n) in counts {
        let share = n as f64 / 10_000.0;
        assert!((share - 0.2).abs() <= 0.02, "{name}: {share}");
    }
}

#[test]
fn mutation_keeps_strategy_and_steps_locally() {
    let schema = default_schema();
    let mut rng = SimRng::seed_from_u64(3);
    for _ in 0..2000 {
        let parent = sample_uniform(&schema, 6, &mut rng).unwrap();
        let child = mutate(&parent, &schema, 6, &mut rng);
        assert_eq!(child.name(), parent.name());
        assert!(validate_config(&child.to_raw(), &schema, 6).is_ok());
        for (k, v) in parent.params() {
            let step = (child.get(k).unwrap().as_f64() - v.as_f64()).abs();
            assert!(step <= 0.1 + 1e-9 || (matches!(v, ParamValue::Int(_)) && step <= 1.0));
        }
    }
}

#[test]
fn landscape_search_reaches_the_optimum_neighbourhood() {
    let schema = default_schema();
    let seeds = seeded_landscape_seeds(20);
    let mut hits = 0;
    for &seed in &seeds {
        let out = genetic_search(&schema, 4, landscape, &options(seed), SearchHooks::default()).unwrap();
        let gen0_best = out.archive.records()[..4].iter().map(|r| r.fitness).fold(0.0, f64::max);
        // best value a single mutation of the gen-0 elite can reach
        let elite_mu = out.archive.records()[..4]
            .iter()
            .find(|r| r.fitness == gen0_best)
            .and_then(|r| r.config.get("proximal_mu"))
            .unwrap()
            .as_f64();
        let reachable = 1.0 - ((elite_mu - 0.5).abs() - 0.1).max(0.0);
        assert!(out.best.fitness <= reachable + 1e-9);
        assert!(out.best.fitness >= gen0_best);
        hits += usize::from(out.best.fitness >= 0.9);
    }
    eprintln!("landscape hits {hits}/20");
    assert!(hits >= 18, "only {hits}/20 seeds reached 0.9");
}

#[test]
fn reference_search_is_fifty_unique_trials() {
    let calls = AtomicUsize::new(0);
    let eval = |c: &StrategyConfig| {
        calls.fetch_add(1, Ordering::SeqCst);
        landscape(c)
    };
    let out = reference_search(&default_schema(), 4, eval, 50, 9, true, SearchHooks::default()).unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 50);
    assert_eq!(out.evaluations, 50);
    let hashes: HashSet<&str> = out.archive.records().iter().map(|r| r.hash.as_str()).collect();
    assert_eq!(hashes.len(), 50);
    assert!(out.best.fitness >= out.worst.fitness);
}

#[test]
fn resume_after_crash_completes_with_eight_unique_records() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("archive.jsonl");
    let schema = default_schema();
    let full = genetic_search(&schema, 4, landscape, &options(4), SearchHooks::default()).unwrap();
    for r in &full.archive.records()[..5] {
        append_record(&path, r).unwrap();
    }
    let partial = Archive::load(&path, &schema, 4).unwrap();
    assert_eq!(partial.len(), 5);
    let calls = AtomicUsize::new(0);
    let eval = |c: &StrategyConfig| {
        calls.fetch_add(1, Ordering::SeqCst);
        landscape(c)
    };
    let mut sink = |r: &fedsel_core::search::FitnessRecord| append_record(&path, r).unwrap();
    let hooks = SearchHooks { resume: Some(&partial), on_record: Some(&mut sink) };
    let resumed = genetic_search(&schema, 4, eval, &options(4), hooks).unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 3);
    assert_eq!(resumed.archive, full.archive);
    let reloaded = Archive::load(&path, &schema, 4).unwrap();
    assert_eq!(reloaded, full.archive);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn genetic_contract_holds(seed in any::<u64>(), n in 3usize..12) {
        let schema = default_schema();
        let calls = AtomicUsize::new(0);
        let eval = |c: &StrategyConfig| {
            calls.fetch_add(1, Ordering::SeqCst);
            let h = hash_config(c);
            EvalOutcome::from(u8::from_str_radix(&h[..2], 16).unwrap() as f64 / 255.0)
        };
        let out = genetic_search(&schema, n, eval, &options(seed), SearchHooks::default()).unwrap();
        prop_assert_eq!(calls.load(Ordering::SeqCst), 8);
        prop_assert_eq!(out.evaluations, 8);
        let recs = out.archive.records();
        let hashes: HashSet<&str> = recs.iter().map(|r| r.hash.as_str()).collect();
        prop_assert_eq!(hashes.len(), 8);
        let gen0 = Archive::from_jsonl(
            &recs[..4].iter().map(|r| r.to_json_line() + "\n").collect::<String>(),
            &schema,
            n,
        ).unwrap();
        let elite_names: HashSet<StrategyName> = gen0.top(2).iter().map(|r| r.config.name()).collect();
        // a child keeps an elite's strategy unless the stall fallback fired,
        // which needs every elite to have a finite mutation neighbourhood
        let finite = gen0
            .top(2)
            .iter()
            .all(|e| e.config.params().values().all(|v| matches!(v, ParamValue::Int(_))));
        for r in &recs[4..] {
            prop_assert_eq!(r.generation, 1);
            prop_assert!(elite_names.contains(&r.config.name()) || finite);
        }
        let mut best = 0.0f64;
        for r in recs {
            prop_assert!(validate_config(&r.config.to_raw(), &schema, n).is_ok());
            best = best.max(r.fitness);
        }
        prop_assert_eq!(out.best.fitness, best);
        let again = genetic_search(&schema, n, eval, &options(seed), SearchHooks::default()).unwrap();
        prop_assert_eq!(&again.archive, &out.archive);
        let par = genetic_search(&schema, n, eval, &GeneticOptions { parallel: true, ..options(seed) }, SearchHooks::default()).unwrap();
        prop_assert_eq!(&par.archive, &out.archive);
    }
}
