//! Budgeted configuration search: a two-generation genetic search with a
//! global no-repeat archive, and a uniform random-search reference used to
//! bracket results with an empirical best and worst.

use std::collections::{HashMap, HashSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::{rng_for, SimRng};
use crate::strategies::{
    round_decimals, validate_config_text, ConfigError, ParamKind, ParamValue, StrategyConfig,
    StrategySchema,
};

/// Consecutive duplicate mutations tolerated before a slot falls back to a
/// uniform draw.
pub const STALL_LIMIT: usize = 20;

/// Consecutive duplicate uniform draws after which the space is declared
/// exhausted.
const SAMPLE_LIMIT: usize = 10_000;

pub const MUTATION_STEP: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("search space exhausted: only {found} unique configurations reachable, budget needs {needed}")]
    SearchSpaceExhausted { found: usize, needed: usize },
    #[error("no strategy in the schema is feasible for {0} clients")]
    NoFeasibleStrategy(usize),
    #[error("duplicate configuration in archive: {0}")]
    Duplicate(String),
    #[error("archive line {line}: {message}")]
    ArchiveFormat { line: usize, message: String },
    #[error("archive line {line}: {source}")]
    ArchiveConfig { line: usize, source: ConfigError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Hex SHA-256 of the canonical JSON form.
pub fn hash_config(config: &StrategyConfig) -> String {
    let digest = Sha256::digest(config.to_canonical_json().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Strategy uniform over those feasible for `n_clients`, then each
/// parameter uniform over its resolved domain.
pub fn sample_uniform(
    schema: &StrategySchema,
    n_clients: usize,
    rng: &mut SimRng,
) -> Result<StrategyConfig, SearchError> {
    let feasible = schema.feasible_strategies(n_clients);
    if feasible.is_empty() {
        return Err(SearchError::NoFeasibleStrategy(n_clients));
    }
    let spec = feasible[rng.random_range(0..feasible.len())];
    let params: Vec<(&str, ParamValue)> = spec
        .params
        .iter()
        .map(|p| {
            let (lo, hi) = p.domain(n_clients);
            let v = match p.kind {
                ParamKind::Int => ParamValue::Int(rng.random_range(lo.ceil() as i64..=hi.floor() as i64)),
                ParamKind::Real if lo == hi => ParamValue::Real(lo),
                ParamKind::Real => ParamValue::Real(round_decimals(rng.random_range(lo..=hi)).clamp(lo, hi)),
            };
            (p.name.as_str(), v)
        })
        .collect();
    Ok(StrategyConfig::unchecked(spec.name, params))
}

/// Strategy-preserving mutation: integers move by -1, 0 or +1, reals by a
/// uniform step in [-0.1, 0.1]; both are clamped to the domain and reals
/// are rounded to four decimals.
pub fn mutate(
    parent: &StrategyConfig,
    schema: &StrategySchema,
    n_clients: usize,
    rng: &mut SimRng,
) -> StrategyConfig {
    let Some(spec) = schema.spec(parent.name()) else {
        return parent.clone();
    };
    let params: Vec<(&str, ParamValue)> = spec
        .params
        .iter()
        .filter_map(|p| {
            let current = parent.get(&p.name)?;
            let (lo, hi) = p.domain(n_clients);
            let v = match p.kind {
                ParamKind::Int => {
                    let delta: i64 = rng.random_range(-1..=1);
                    let v = current.as_f64() as i64 + delta;
                    ParamValue::Int(v.clamp(lo.ceil() as i64, hi.floor() as i64))
                }
                ParamKind::Real => {
                    let eps = rng.random_range(-MUTATION_STEP..=MUTATION_STEP);
                    ParamValue::Real(round_decimals((current.as_f64() + eps).clamp(lo, hi)).clamp(lo, hi))
                }
            };
            Some((p.name.as_str(), v))
        })
        .collect();
    StrategyConfig::unchecked(parent.name(), params)
}

/// What an evaluation hands back: the fitness and, optionally, where the
/// run's artifacts live.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalOutcome {
    pub fitness: f64,
    pub run_ref: Option<String>,
}

impl From<f64> for EvalOutcome {
    fn from(fitness: f64) -> Self {
        Self { fitness, run_ref: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitnessRecord {
    pub config: StrategyConfig,
    pub hash: String,
    pub fitness: f64,
    /// Zero-based generation (always 0 for the reference search).
    pub generation: usize,
    pub run_ref: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    config: String,
    hash: String,
    fitness: f64,
    generation: usize,
    #[serde(default)]
    run: Option<String>,
}

impl FitnessRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&RecordLine {
            config: self.config.to_canonical_json(),
            hash: self.hash.clone(),
            fitness: self.fitness,
            generation: self.generation,
            run: self.run_ref.clone(),
        })
        .expect("record serialises")
    }
}

/// Append-only, duplicate-free record of every evaluated configuration in
/// evaluation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    records: Vec<FitnessRecord>,
    hashes: HashSet<String>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[FitnessRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, hash: &str) -> bool {
        self.hashes.contains(hash)
    }

    pub fn push(&mut self, record: FitnessRecord) -> Result<(), SearchError> {
        if !self.hashes.insert(record.hash.clone()) {
            return Err(SearchError::Duplicate(record.config.to_literal()));
        }
        self.records.push(record);
        Ok(())
    }

    /// The `k` fittest records, earliest first among equals.
    pub fn top(&self, k: usize) -> Vec<&FitnessRecord> {
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        order.sort_by(|&a, &b| {
            self.records[b]
                .fitness
                .total_cmp(&self.records[a].fitness)
                .then(a.cmp(&b))
        });
        order.into_iter().take(k).map(|i| &self.records[i]).collect()
    }

    pub fn best(&self) -> Option<&FitnessRecord> {
        self.top(1).into_iter().next()
    }

    /// Lowest fitness, earliest first among equals.
    pub fn worst(&self) -> Option<&FitnessRecord> {
        self.records
            .iter()
            .enumerate()
            .min_by(|(i, a), (j, b)| a.fitness.total_cmp(&b.fitness).then(i.cmp(j)))
            .map(|(_, r)| r)
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| r.to_json_line() + "\n")
            .collect()
    }

    /// Parses JSON lines, re-validating each configuration for `n_clients`.
    pub fn from_jsonl(text: &str, schema: &StrategySchema, n_clients: usize) -> Result<Self, SearchError> {
        let mut archive = Archive::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let line_no = i + 1;
            let rec: RecordLine = serde_json::from_str(line).map_err(|e| SearchError::ArchiveFormat {
                line: line_no,
                message: e.to_string(),
            })?;
            let config = validate_config_text(&rec.config, schema, n_clients)
                .map_err(|source| SearchError::ArchiveConfig { line: line_no, source })?;
            let hash = hash_config(&config);
            if hash != rec.hash {
                return Err(SearchError::ArchiveFormat {
                    line: line_no,
                    message: "hash does not match configuration".into(),
                });
            }
            archive.push(FitnessRecord {
                config,
                hash,
                fitness: rec.fitness,
                generation: rec.generation,
                run_ref: rec.run,
            })?;
        }
        Ok(archive)
    }

    pub fn load(path: &Path, schema: &StrategySchema, n_clients: usize) -> Result<Self, SearchError> {
        Self::from_jsonl(&std::fs::read_to_string(path)?, schema, n_clients)
    }
}

/// Appends one record to a JSON-lines archive file.
pub fn append_record(path: &Path, record: &FitnessRecord) -> Result<(), SearchError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", record.to_json_line())?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneticOptions {
    pub generations: usize,
    pub population: usize,
    pub top_k: usize,
    pub stall_limit: usize,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for GeneticOptions {
    fn default() -> Self {
        Self {
            generations: 2,
            population: 4,
            top_k: 2,
            stall_limit: STALL_LIMIT,
            seed: 0,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: FitnessRecord,
    pub archive: Archive,
    /// Evaluations actually performed (resumed records are not re-run).
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceOutcome {
    pub best: FitnessRecord,
    pub worst: FitnessRecord,
    pub archive: Archive,
    pub evaluations: usize,
}

/// Hooks shared by both searches: previously evaluated records to reuse and
/// a sink called for every committed record, in order.
#[derive(Default)]
pub struct SearchHooks<'a> {
    pub resume: Option<&'a Archive>,
    pub on_record: Option<&'a mut dyn FnMut(&FitnessRecord)>,
}

fn sample_unique(
    schema: &StrategySchema,
    n_clients: usize,
    rng: &mut SimRng,
    taken: &HashSet<String>,
    needed: usize,
) -> Result<(StrategyConfig, String), SearchError> {
    for _ in 0..SAMPLE_LIMIT {
        let c = sample_uniform(schema, n_clients, rng)?;
        let h = hash_config(&c);
        if !taken.contains(&h) {
            return Ok((c, h));
        }
    }
    Err(SearchError::SearchSpaceExhausted { found: taken.len(), needed })
}

fn sanitize(f: f64) -> f64 {
    if f.is_finite() {
        f.clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Evaluates one generation's candidates and commits them in candidate
/// order. Candidates already present in the resume archive keep their
/// stored fitness.
fn evaluate_generation<E>(
    candidates: Vec<(StrategyConfig, String)>,
    generation: usize,
    evaluate: &E,
    parallel: bool,
    archive: &mut Archive,
    hooks: &mut SearchHooks<'_>,
) -> Result<usize, SearchError>
where
    E: Fn(&StrategyConfig) -> EvalOutcome + Sync,
{
    let prior: HashMap<&str, &FitnessRecord> = hooks
        .resume
        .map(|a| a.records.iter().map(|r| (r.hash.as_str(), r)).collect())
        .unwrap_or_default();
    let run = |(config, hash): &(StrategyConfig, String)| -> (EvalOutcome, bool) {
        match prior.get(hash.as_str()) {
            Some(r) => (EvalOutcome { fitness: r.fitness, run_ref: r.run_ref.clone() }, false),
            None => (evaluate(config), true),
        }
    };
    let outcomes: Vec<(EvalOutcome, bool)> = if parallel {
        candidates.par_iter().map(run).collect()
    } else {
        candidates.iter().map(run).collect()
    };
    let mut fresh = 0;
    for ((config, hash), (outcome, evaluated)) in candidates.into_iter().zip(outcomes) {
        fresh += usize::from(evaluated);
        let record = FitnessRecord {
            config,
            hash,
            fitness: sanitize(outcome.fitness),
            generation,
            run_ref: outcome.run_ref,
        };
        if evaluated {
            if let Some(sink) = hooks.on_record.as_mut() {
                sink(&record);
            }
        }
        archive.push(record)?;
    }
    Ok(fresh)
}

/// Genetic search. Generation 0 draws unique uniform samples; each later
/// generation mutates parents picked uniformly from the archive's global
/// top-k. A slot whose mutations keep colliding with the archive falls back
/// to a uniform draw after `stall_limit` tries. Returns the fittest record
/// over the whole archive, earliest first among equals.
pub fn genetic_search<E>(
    schema: &StrategySchema,
    n_clients: usize,
    evaluate: E,
    options: &GeneticOptions,
    mut hooks: SearchHooks<'_>,
) -> Result<SearchOutcome, SearchError>
where
    E: Fn(&StrategyConfig) -> EvalOutcome + Sync,
{
    let mut rng = rng_for(options.seed, "genetic_search", &[]);
    let mut archive = Archive::new();
    let budget = options.generations * options.population;
    let mut evaluations = 0;
    for generation in 0..options.generations {
        let mut taken = archive.hashes.clone();
        let mut candidates = Vec::with_capacity(options.population);
        let parents: Vec<StrategyConfig> = archive
            .top(options.top_k)
            .into_iter()
            .map(|r| r.config.clone())
            .collect();
        while candidates.len() < options.population {
            let mut picked = None;
            if !parents.is_empty() {
                for _ in 0..options.stall_limit {
                    let parent = &parents[rng.random_range(0..parents.len())];
                    let child = mutate(parent, schema, n_clients, &mut rng);
                    let h = hash_config(&child);
                    if !taken.contains(&h) {
                        picked = Some((child, h));
                        break;
                    }
                }
            }
            let (config, hash) = match picked {
                Some(p) => p,
                None => sample_unique(schema, n_clients, &mut rng, &taken, budget)?,
            };
            taken.insert(hash.clone());
            candidates.push((config, hash));
        }
        evaluations += evaluate_generation(
            candidates,
            generation,
            &evaluate,
            options.parallel,
            &mut archive,
            &mut hooks,
        )?;
    }
    let best = archive
        .best()
        .cloned()
        .ok_or(SearchError::SearchSpaceExhausted { found: 0, needed: budget })?;
    Ok(SearchOutcome { best, archive, evaluations })
}

/// Uniform random search over `trials` unique configurations.
pub fn reference_search<E>(
    schema: &StrategySchema,
    n_clients: usize,
    evaluate: E,
    trials: usize,
    seed: u64,
    parallel: bool,
    mut hooks: SearchHooks<'_>,
) -> Result<ReferenceOutcome, SearchError>
where
    E: Fn(&StrategyConfig) -> EvalOutcome + Sync,
{
    let mut rng = rng_for(seed, "reference_search", &[]);
    let mut taken = HashSet::new();
    let mut candidates = Vec::with_capacity(trials);
    for _ in 0..trials {
        let (c, h) = sample_unique(schema, n_clients, &mut rng, &taken, trials)?;
        taken.insert(h.clone());
        candidates.push((c, h));
    }
    let mut archive = Archive::new();
    let evaluations = evaluate_generation(candidates, 0, &evaluate, parallel, &mut archive, &mut hooks)?;
    let exhausted = || SearchError::SearchSpaceExhausted { found: 0, needed: trials };
    Ok(ReferenceOutcome {
        best: archive.best().cloned().ok_or_else(exhausted)?,
        worst: archive.worst().cloned().ok_or_else(exhausted)?,
        archive,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strategies::{default_schema, validate_config, StrategyName, StrategySpec};
    use rand::SeedableRng;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn rng(seed: u64) -> SimRng {
        SimRng::seed_from_u64(seed)
    }

    #[test]
    fn hash_ignores_construction_order() {
        let a = StrategyConfig::krum(1, 3);
        let b = StrategyConfig::unchecked(
            StrategyName::Krum,
            [
                ("num_clients_to_keep", ParamValue::Int(3)),
                ("num_malicious_clients", ParamValue::Int(1)),
            ],
        );
        assert_eq!(hash_config(&a), hash_config(&b));
        assert_ne!(
            hash_config(&StrategyConfig::fed_prox(0.1)),
            hash_config(&StrategyConfig::fed_prox(0.1001))
        );
        assert_eq!(hash_config(&a).len(), 64);
    }

    #[test]
    fn samples_are_valid_and_in_domain() {
        let s = default_schema();
        let mut r = rng(1);
        for n in [3, 4, 10] {
            for _ in 0..500 {
                let c = sample_uniform(&s, n, &mut r).unwrap();
                assert_eq!(validate_config(&c.to_raw(), &s, n).unwrap(), c);
                if n == 4 && c.name() == StrategyName::Krum {
                    assert!(c.get("num_malicious_clients").unwrap().as_f64() <= 1.0);
                }
            }
        }
    }

    #[test]
    fn mutation_edges() {
        let s = default_schema();
        let mut r = rng(2);
        for _ in 0..200 {
            let c = mutate(&StrategyConfig::fed_prox(0.95), &s, 4, &mut r);
            let mu = c.get("proximal_mu").unwrap().as_f64();
            assert!((0.85..=1.0).contains(&mu), "{mu}");
            let k = mutate(&StrategyConfig::krum(0, 1), &s, 4, &mut r);
            assert!(k.get("num_malicious_clients").unwrap().as_f64() >= 0.0);
            assert!(k.get("num_clients_to_keep").unwrap().as_f64() >= 1.0);
        }
        assert_eq!(mutate(&StrategyConfig::fed_avg(), &s, 4, &mut r), StrategyConfig::fed_avg());
    }

    #[test]
    fn genetic_budget_is_exact() {
        let calls = AtomicUsize::new(0);
        let out = genetic_search(
            &default_schema(),
            4,
            |c: &StrategyConfig| {
                calls.fetch_add(1, Ordering::SeqCst);
                EvalOutcome::from(c.get("proximal_mu").map_or(0.2, |v| v.as_f64()))
            },
            &GeneticOptions { seed: 5, ..Default::default() },
            SearchHooks::default(),
        )
        .unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 8);
        assert_eq!(out.evaluations, 8);
        assert_eq!(out.archive.len(), 8);
        let gen0_max = out.archive.records()[..4].iter().map(|r| r.fitness).fold(0.0, f64::max);
        assert!(out.best.fitness >= gen0_max);
    }

    #[test]
    fn parameterless_elites_fall_back_to_uniform() {
        // only fed_avg scores, so both elites can be parameterless
        let out = genetic_search(
            &default_schema(),
            4,
            |c: &StrategyConfig| EvalOutcome::from(if c.name() == StrategyName::FedAvg { 1.0 } else { 0.0 }),
            &GeneticOptions { seed: 11, ..Default::default() },
            SearchHooks::default(),
        )
        .unwrap();
        assert_eq!(out.archive.len(), 8);
    }

    #[test]
    fn degenerate_schema_is_exhausted() {
        let schema = StrategySchema {
            strategies: vec![StrategySpec { name: StrategyName::FedAvg, params: vec![] }],
        };
        let err = genetic_search(
            &schema,
            4,
            |_: &StrategyConfig| EvalOutcome::from(0.5),
            &GeneticOptions::default(),
            SearchHooks::default(),
        )
        .unwrap_err();
        assert!(matches!(err, SearchError::SearchSpaceExhausted { .. }));
    }

    #[test]
    fn reference_search_brackets() {
        let out = reference_search(
            &default_schema(),
            4,
            |c: &StrategyConfig| EvalOutcome::from(c.get("beta").map_or(0.1, |v| v.as_f64())),
            50,
            3,
            true,
            SearchHooks::default(),
        )
        .unwrap();
        assert_eq!(out.archive.len(), 50);
        assert!(out.best.fitness >= out.worst.fitness);
    }

    #[test]
    fn archive_round_trips_through_jsonl() {
        let s = default_schema();
        let out = genetic_search(
            &s,
            4,
            |c: &StrategyConfig| EvalOutcome {
                fitness: 0.5,
                run_ref: Some(format!("runs/{}", c.name())),
            },
            &GeneticOptions { seed: 9, ..Default::default() },
            SearchHooks::default(),
        )
        .unwrap();
        let text = out.archive.to_jsonl();
        let back = Archive::from_jsonl(&text, &s, 4).unwrap();
        assert_eq!(back, out.archive);
        let dup = format!("{text}{}", text.lines().next().unwrap());
        assert!(matches!(Archive::from_jsonl(&dup, &s, 4), Err(SearchError::Duplicate(_))));
    }

    #[test]
    fn fitness_is_sanitised() {
        let out = reference_search(
            &default_schema(),
            4,
            |_: &StrategyConfig| EvalOutcome::from(f64::NAN),
            5,
            0,
            false,
            SearchHooks::default(),
        )
        .unwrap();
        assert!(out.archive.records().iter().all(|r| r.fitness == 0.0));
    }

    fn score(c: &StrategyConfig) -> EvalOutcome {
        let v: f64 = c.params().values().map(|v| v.as_f64()).sum();
        EvalOutcome::from((v / 10.0).min(1.0))
    }

    #[test]
    fn parallel_matches_sequential() {
        let s = default_schema();
        let opts = GeneticOptions { seed: 21, ..Default::default() };
        let seq = genetic_search(&s, 10, score, &opts, SearchHooks::default()).unwrap();
        let par = genetic_search(&s, 10, score, &GeneticOptions { parallel: true, ..opts }, SearchHooks::default()).unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn resume_reuses_committed_records() {
        let s = default_schema();
        let opts = GeneticOptions { seed: 4, ..Default::default() };
        let full = genetic_search(&s, 10, score, &opts, SearchHooks::default()).unwrap();
        let mut partial = Archive::new();
        for r in &full.archive.records()[..5] {
            partial.push(r.clone()).unwrap();
        }
        let mut sunk = Vec::new();
        let mut sink = |r: &FitnessRecord| sunk.push(r.hash.clone());
        let resumed = genetic_search(
            &s,
            10,
            score,
            &opts,
            SearchHooks { resume: Some(&partial), on_record: Some(&mut sink) },
        )
        .unwrap();
        assert_eq!(resumed.evaluations, 3);
        assert_eq!(resumed.archive, full.archive);
        assert_eq!(sunk.len(), 3);
    }
}
