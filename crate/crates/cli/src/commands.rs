use std::cell::RefCell;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fedsel_core::advisor::{
    build_prompts, build_prompts_from_description, recommend_with_prompts, AdvisorError,
    AdvisorOutcome, ChatMessage, CompletionBackend, HttpBackend, HttpSettings, PromptPair,
    RetryPolicy, RuleMockBackend, ScriptedBackend, API_KEY_ENV,
};
use fedsel_core::dataset::{generate_synthetic_with, load_csv, ClientPartition, Dataset};
use fedsel_core::detect::{build_report, DetectOptions, HeterogeneityReport};
use fedsel_core::engine::{fitness, run_federation, RunConfig, RunResult, RunStatus};
use fedsel_core::model::architecture_for;
use fedsel_core::search::{
    append_record, genetic_search, hash_config, reference_search, Archive, EvalOutcome,
    FitnessRecord, GeneticOptions, SearchHooks, STALL_LIMIT,
};
use fedsel_core::strategies::{default_schema, StrategyConfig};
use serde_json::{json, Value};

use crate::config::{BackendKind, DataSource, ExperimentConfig, Mode};
use crate::error::{CliError, CliResult};
use crate::rundir::RunDirectory;

pub const ARCHIVE_FILE: &str = "archive.jsonl";

/// Partitions plus the model shape that fits them.
pub struct Federation {
    pub partitions: Vec<ClientPartition>,
    pub architecture: Vec<usize>,
}

/// Loads or generates the dataset. Synthetic data for repetition `rep` uses
/// seed `seed + rep`.
pub fn load_dataset(cfg: &ExperimentConfig, rep: u64) -> CliResult<Dataset> {
    match &cfg.data {
        DataSource::Synthetic { n_samples, n_features, n_classes, separation } => {
            generate_synthetic_with(*n_samples, *n_features, *n_classes, *separation, cfg.seed + rep)
                .map_err(|e| CliError::validation("data", e))
        }
        DataSource::Csv { path, label_column } => {
            load_csv(path, label_column).map_err(|e| CliError::validation(&path.display().to_string(), e))
        }
    }
}

pub fn federation(cfg: &ExperimentConfig, rep: u64) -> CliResult<Federation> {
    let data = load_dataset(cfg, rep)?;
    let mut spec = cfg.partition.clone();
    spec.seed += rep;
    let partitions = spec.apply(&data).map_err(|e| CliError::validation("partition", e))?;
    Ok(Federation {
        architecture: architecture_for(&data, &cfg.model.hidden),
        partitions,
    })
}

fn run_config(cfg: &ExperimentConfig, fed: &Federation, strategy: &StrategyConfig, seed: u64) -> RunConfig {
    RunConfig {
        rounds: cfg.rounds,
        train: cfg.train,
        parallel: cfg.parallel(),
        ..RunConfig::new(strategy.clone(), fed.architecture.clone(), seed)
    }
}

fn execute(cfg: &ExperimentConfig, fed: &Federation, strategy: &StrategyConfig, seed: u64) -> RunResult {
    run_federation(&run_config(cfg, fed, strategy, seed), &fed.partitions)
}

fn result_json(strategy: &StrategyConfig, result: &RunResult) -> Value {
    json!({
        "strategy": strategy.to_literal(),
        "status": result.status,
        "failure_reason": result.failure_reason,
        "fitness": fitness(result),
        "final_weighted_accuracy": result.rounds.last().map(|r| r.weighted_accuracy),
        "rounds": result.rounds.len(),
    })
}

/// Writes `metrics.csv` and `result.json` under `prefix` (empty for the run
/// directory itself).
fn persist_run(dir: &mut RunDirectory, prefix: &str, strategy: &StrategyConfig, result: &RunResult) -> CliResult<()> {
    dir.write(&format!("{prefix}metrics.csv"), &result.metrics_csv())?;
    dir.write_json(&format!("{prefix}result.json"), &result_json(strategy, result))
}

fn warn_failed(result: &RunResult) {
    if result.status == RunStatus::Failed {
        eprintln!(
            "warning: run failed ({}); fitness is 0",
            result.failure_reason.as_deref().unwrap_or("unknown reason")
        );
    }
}

pub fn detect_report(cfg: &ExperimentConfig, fed: &Federation, seed: u64) -> CliResult<HeterogeneityReport> {
    let options = DetectOptions {
        thresholds: cfg.detect.thresholds,
        train: cfg.detect.probe,
        seed,
        parallel: cfg.parallel(),
    };
    build_report(&fed.partitions, &fed.architecture, &options).map_err(|e| CliError::validation("detect", e))
}

fn fmt_list(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

/// The three flag lines followed by the numbers behind them.
pub fn report_text(r: &HeterogeneityReport) -> String {
    let t = &r.thresholds;
    format!(
        "{}\n\nmax JSD: {:.4} (threshold {})\nper-client JSD: {}\nmax centroid distance: {:.4} (threshold {})\n\
         outlier flag counts: {:?} of {} repetitions (flagged at >= {})\nentropy spread: {:.4}\n",
        r.flag_lines(),
        r.max_jsd,
        t.label_jsd,
        fmt_list(&r.per_client_jsd),
        r.max_centroid_distance,
        t.feature_distance,
        r.flag_counts,
        t.repetitions,
        t.rep_threshold,
        r.entropy_spread,
    )
}

fn write_report(dir: &mut RunDirectory, report: &HeterogeneityReport) -> CliResult<()> {
    dir.write_json("report.json", report)?;
    dir.write("report.txt", &report_text(report))
}

fn read_script(path: &Path) -> CliResult<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read advisor script {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::validation(&format!("advisor.script {}", path.display()), e))
}

fn api_key() -> CliResult<String> {
    std::env::var(API_KEY_ENV)
        .map_err(|_| CliError::Usage(format!("{API_KEY_ENV} is not set; export it or use --mock")))
}

pub fn make_backend(cfg: &ExperimentConfig, log_path: Option<PathBuf>) -> CliResult<Box<dyn CompletionBackend>> {
    Ok(match cfg.advisor.backend {
        BackendKind::Mock => Box::new(RuleMockBackend),
        BackendKind::Script => {
            let path = cfg.advisor.script.as_deref().expect("validated");
            Box::new(ScriptedBackend::new(read_script(path)?))
        }
        BackendKind::Http => {
            let key = api_key()?;
            let settings = HttpSettings {
                base_url: cfg.advisor.base_url.clone(),
                model: cfg.advisor.model.clone(),
                timeout_secs: cfg.advisor.timeout_secs,
            };
            Box::new(HttpBackend::new(settings, key, log_path))
        }
    })
}

/// Runs the validation loop and persists the conversation whatever the
/// outcome.
fn advise(
    cfg: &ExperimentConfig,
    dir: &mut RunDirectory,
    prompts: &PromptPair,
) -> CliResult<AdvisorOutcome> {
    dir.write_json("prompt.json", prompts)?;
    let log = dir.join("advisor_log.jsonl");
    let mut backend = make_backend(cfg, Some(log.clone()))?;
    let result = recommend_with_prompts(prompts, &default_schema(), cfg.n_clients(), backend.as_mut(), &RetryPolicy::default());
    if log.exists() {
        dir.register("advisor_log.jsonl");
    }
    match &result {
        Ok(out) => dir.write_json("transcript.json", &out.transcript)?,
        Err(AdvisorError::Exhausted { transcript, .. }) => dir.write_json("transcript.json", transcript)?,
        Err(AdvisorError::Transport { raw_responses, .. }) => {
            let mut messages = vec![ChatMessage::system(&prompts.system), ChatMessage::user(&prompts.user)];
            messages.extend(raw_responses.iter().map(ChatMessage::assistant));
            dir.write_json("transcript.json", &messages)?
        }
    }
    result.map_err(CliError::from)
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, output: Option<&Path>) -> CliResult<PathBuf> {
    let mut dir = RunDirectory::create(cfg, Mode::GenData.as_str())?;
    let data = load_dataset(cfg, 0)?;
    data.write_csv(&dir.join("data.csv")).map_err(|e| CliError::Internal(e.to_string()))?;
    dir.register("data.csv");
    if let Some(out) = output {
        data.write_csv(out).map_err(|e| CliError::Internal(e.to_string()))?;
        println!("wrote {}", out.display());
    }
    println!(
        "{} samples, {} features, {} classes, class counts {:?}",
        data.len(),
        data.n_features(),
        data.n_classes(),
        data.class_counts()
    );
    dir.finish(
        Mode::GenData.as_str(),
        json!({ "samples": data.len(), "features": data.n_features(), "classes": data.n_classes() }),
    )
}

pub fn cmd_partition(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let mut dir = RunDirectory::create(cfg, Mode::Partition.as_str())?;
    let fed = federation(cfg, 0)?;
    let mut clients = Vec::new();
    println!("client  samples  class counts");
    for p in &fed.partitions {
        let name = format!("partitions/client_{}.csv", p.client_id);
        std::fs::create_dir_all(dir.join("partitions"))?;
        p.data.write_csv(&dir.join(&name)).map_err(|e| CliError::Internal(e.to_string()))?;
        dir.register(&name);
        println!("{:>6}  {:>7}  {:?}", p.client_id, p.data.len(), p.data.class_counts());
        clients.push(json!({
            "client_id": p.client_id,
            "samples": p.data.len(),
            "class_counts": p.data.class_counts(),
        }));
    }
    dir.write_json("partitions.json", &clients)?;
    dir.finish(Mode::Partition.as_str(), json!({ "clients": clients.len() }))
}

pub fn cmd_detect(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let mut dir = RunDirectory::create(cfg, Mode::Detect.as_str())?;
    let fed = federation(cfg, 0)?;
    let report = detect_report(cfg, &fed, cfg.seed)?;
    write_report(&mut dir, &report)?;
    println!("{}", report.flag_lines());
    dir.finish(
        Mode::Detect.as_str(),
        json!({
            "label_skew": report.label_skew,
            "feature_skew": report.feature_skew,
            "outlier_risk": report.outlier_risk,
        }),
    )
}

pub fn cmd_recommend(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    if cfg.advisor.backend == BackendKind::Http {
        api_key()?;
    }
    let mut dir = RunDirectory::create(cfg, Mode::Recommend.as_str())?;
    let fed = federation(cfg, 0)?;
    let schema = default_schema();
    let prompts = match &cfg.advisor.description {
        Some(text) => build_prompts_from_description(text, &schema, cfg.n_clients()),
        None => {
            let report = detect_report(cfg, &fed, cfg.seed)?;
            write_report(&mut dir, &report)?;
            println!("{}\n", report.flag_lines());
            build_prompts(&report, &schema, cfg.n_clients())
        }
    };
    let outcome = advise(cfg, &mut dir, &prompts)?;
    let strategy = outcome.config;
    dir.write("strategy.txt", &format!("{}\n", strategy.to_literal()))?;
    println!("recommended {} (attempt {})", strategy.to_literal(), outcome.attempts);
    let result = execute(cfg, &fed, &strategy, cfg.seed);
    warn_failed(&result);
    persist_run(&mut dir, "", &strategy, &result)?;
    println!("fitness {:.4} over {} rounds", fitness(&result), result.rounds.len());
    dir.finish(
        Mode::Recommend.as_str(),
        json!({
            "strategy": strategy.to_literal(),
            "attempts": outcome.attempts,
            "fitness": fitness(&result),
        }),
    )
}

pub fn cmd_run(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let strategy = cfg.run_strategy()?;
    let mut dir = RunDirectory::create(cfg, Mode::Run.as_str())?;
    let fed = federation(cfg, 0)?;
    let result = execute(cfg, &fed, &strategy, cfg.seed);
    warn_failed(&result);
    persist_run(&mut dir, "", &strategy, &result)?;
    println!("{} fitness {:.4} over {} rounds", strategy.to_literal(), fitness(&result), result.rounds.len());
    dir.finish(
        Mode::Run.as_str(),
        json!({ "strategy": strategy.to_literal(), "fitness": fitness(&result) }),
    )
}

/// Evaluation used by both searches: one fresh federation run per config,
/// persisted under `trials/<hash16>/`.
fn trial_evaluator<'a>(
    cfg: &'a ExperimentConfig,
    fed: &'a Federation,
    root: &'a Path,
) -> impl Fn(&StrategyConfig) -> EvalOutcome + Sync + 'a {
    move |config: &StrategyConfig| {
        let result = execute(cfg, fed, config, cfg.seed);
        let rel = format!("trials/{}", &hash_config(config)[..16]);
        let dir = root.join(&rel);
        let written = std::fs::create_dir_all(&dir)
            .and_then(|_| std::fs::write(dir.join("metrics.csv"), result.metrics_csv()))
            .and_then(|_| {
                let text = serde_json::to_string_pretty(&result_json(config, &result)).unwrap_or_default();
                std::fs::write(dir.join("result.json"), text + "\n")
            });
        if let Err(e) = written {
            log::error!("could not persist trial {rel}: {e}");
        }
        EvalOutcome { fitness: fitness(&result), run_ref: Some(rel) }
    }
}

fn record_json(r: &FitnessRecord) -> Value {
    json!({
        "config": r.config.to_literal(),
        "fitness": r.fitness,
        "generation": r.generation,
        "run": r.run_ref,
    })
}

/// Appends each fresh record to the archive file, remembering the first
/// write failure.
struct ArchiveSink {
    path: PathBuf,
    error: RefCell<Option<String>>,
}

impl ArchiveSink {
    fn push(&self, r: &FitnessRecord) {
        if let Err(e) = append_record(&self.path, r) {
            self.error.borrow_mut().get_or_insert(e.to_string());
        }
    }

    fn check(&self) -> CliResult<()> {
        match self.error.borrow().as_ref() {
            Some(e) => Err(CliError::Internal(format!("archive write failed: {e}"))),
            None => Ok(()),
        }
    }
}

pub fn cmd_search(cfg: &ExperimentConfig, resume: Option<&Path>) -> CliResult<PathBuf> {
    let schema = default_schema();
    let (mut dir, prior) = match resume {
        Some(path) => {
            let archive_path = path.join(ARCHIVE_FILE);
            let prior = if archive_path.exists() {
                Archive::load(&archive_path, &schema, cfg.n_clients())
                    .map_err(|e| CliError::validation(&archive_path.display().to_string(), e))?
            } else {
                Archive::new()
            };
            (RunDirectory::reopen(path)?, prior)
        }
        None => (RunDirectory::create(cfg, Mode::Search.as_str())?, Archive::new()),
    };
    let fed = federation(cfg, 0)?;
    let options = GeneticOptions {
        generations: cfg.search.generations,
        population: cfg.search.population,
        top_k: cfg.search.top_k,
        stall_limit: STALL_LIMIT,
        seed: cfg.seed,
        parallel: cfg.parallel(),
    };
    let sink = ArchiveSink { path: dir.join(ARCHIVE_FILE), error: RefCell::new(None) };
    let mut on_record = |r: &FitnessRecord| {
        println!("  gen {} {:.4} {}", r.generation, r.fitness, r.config.to_literal());
        sink.push(r);
    };
    if !prior.is_empty() {
        println!("resuming with {} archived evaluations", prior.len());
    }
    let hooks = SearchHooks { resume: Some(&prior), on_record: Some(&mut on_record) };
    let evaluate = trial_evaluator(cfg, &fed, dir.path());
    let outcome = genetic_search(&schema, cfg.n_clients(), evaluate, &options, hooks)
        .map_err(|e| CliError::validation("search", e))?;
    sink.check()?;
    dir.register(ARCHIVE_FILE);
    dir.register("trials");
    dir.write_json("best.json", &record_json(&outcome.best))?;
    println!("best {} fitness {:.4}", outcome.best.config.to_literal(), outcome.best.fitness);
    dir.finish(
        Mode::Search.as_str(),
        json!({
            "best": record_json(&outcome.best),
            "evaluations": outcome.evaluations,
            "resumed": prior.len(),
            "archive_size": outcome.archive.len(),
        }),
    )
}

pub fn cmd_hpo_ref(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let schema = default_schema();
    let mut dir = RunDirectory::create(cfg, Mode::HpoRef.as_str())?;
    let fed = federation(cfg, 0)?;
    let sink = ArchiveSink { path: dir.join(ARCHIVE_FILE), error: RefCell::new(None) };
    let mut on_record = |r: &FitnessRecord| sink.push(r);
    let hooks = SearchHooks { resume: None, on_record: Some(&mut on_record) };
    let evaluate = trial_evaluator(cfg, &fed, dir.path());
    let outcome = reference_search(&schema, cfg.n_clients(), evaluate, cfg.search.trials, cfg.seed, cfg.parallel(), hooks)
        .map_err(|e| CliError::validation("hpo-ref", e))?;
    sink.check()?;
    dir.register(ARCHIVE_FILE);
    dir.register("trials");
    let envelope = json!({
        "best": record_json(&outcome.best),
        "worst": record_json(&outcome.worst),
        "trials": outcome.evaluations,
    });
    dir.write_json("envelope.json", &envelope)?;
    println!("best  {:.4} {}", outcome.best.fitness, outcome.best.config.to_literal());
    println!("worst {:.4} {}", outcome.worst.fitness, outcome.worst.config.to_literal());
    dir.finish(Mode::HpoRef.as_str(), envelope)
}

/// Column order of the comparison table.
pub const BENCH_COLUMNS: [&str; 5] = ["empirical_best", "genetic", "advisor", "fedavg", "empirical_worst"];

/// Mean and sample standard deviation; the latter needs two values.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

struct BenchRow {
    fitness: [f64; 5],
    seconds: [f64; 5],
    advisor_config: String,
    genetic_config: String,
}

fn bench_repetition(cfg: &ExperimentConfig, rep: u64) -> CliResult<BenchRow> {
    let schema = default_schema();
    let n = cfg.n_clients();
    let seed = cfg.seed + rep;
    let fed = federation(cfg, rep)?;
    let eval = |c: &StrategyConfig| EvalOutcome::from(fitness(&execute(cfg, &fed, c, seed)));

    let start = Instant::now();
    let envelope = reference_search(&schema, n, eval, cfg.search.trials, seed, cfg.parallel(), SearchHooks::default())
        .map_err(|e| CliError::validation("bench", e))?;
    let t_reference = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let options = GeneticOptions {
        generations: cfg.search.generations,
        population: cfg.search.population,
        top_k: cfg.search.top_k,
        stall_limit: STALL_LIMIT,
        seed,
        parallel: cfg.parallel(),
    };
    let genetic = genetic_search(&schema, n, eval, &options, SearchHooks::default())
        .map_err(|e| CliError::validation("bench", e))?;
    let t_genetic = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let report = detect_report(cfg, &fed, seed)?;
    let mut backend = make_backend(cfg, None)?;
    let advice = recommend_with_prompts(&build_prompts(&report, &schema, n), &schema, n, backend.as_mut(), &RetryPolicy::default())?;
    let advisor = fitness(&execute(cfg, &fed, &advice.config, seed));
    let t_advisor = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let fedavg = fitness(&execute(cfg, &fed, &StrategyConfig::fed_avg(), seed));
    let t_fedavg = start.elapsed().as_secs_f64();

    Ok(BenchRow {
        fitness: [envelope.best.fitness, genetic.best.fitness, advisor, fedavg, envelope.worst.fitness],
        seconds: [t_reference, t_genetic, t_advisor, t_fedavg, t_reference],
        advisor_config: advice.config.to_literal(),
        genetic_config: genetic.best.config.to_literal(),
    })
}

/// Aligned text table: one column per approach, rows for accuracy and time.
pub fn bench_table(accuracy: &[(f64, Option<f64>)], seconds: &[f64]) -> String {
    let cell = |(m, s): &(f64, Option<f64>)| match s {
        Some(s) => format!("{m:.4} ± {s:.4}"),
        None => format!("{m:.4}"),
    };
    let width = BENCH_COLUMNS.iter().map(|c| c.len()).max().unwrap_or(0).max(15) + 2;
    let mut out = format!("{:<18}", "");
    for c in BENCH_COLUMNS {
        out.push_str(&format!("{c:>width$}"));
    }
    out.push('\n');
    out.push_str(&format!("{:<18}", "weighted accuracy"));
    for a in accuracy {
        out.push_str(&format!("{:>width$}", cell(a)));
    }
    out.push('\n');
    out.push_str(&format!("{:<18}", "mean seconds"));
    for s in seconds {
        out.push_str(&format!("{:>width$}", format!("{s:.3}")));
    }
    out.push('\n');
    out
}

pub fn cmd_bench(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    if cfg.advisor.backend == BackendKind::Http {
        api_key()?;
    }
    let mut dir = RunDirectory::create(cfg, Mode::Bench.as_str())?;
    let reps = cfg.bench.repetitions;
    let mut rows = Vec::with_capacity(reps);
    let mut runs_csv = String::from("rep,approach,fitness,seconds\n");
    let mut configs = Vec::new();
    for rep in 0..reps as u64 {
        let row = bench_repetition(cfg, rep)?;
        for (i, name) in BENCH_COLUMNS.iter().enumerate() {
            runs_csv.push_str(&format!("{rep},{name},{},{}\n", row.fitness[i], row.seconds[i]));
        }
        eprintln!(
            "rep {rep}: best {:.4} genetic {:.4} advisor {:.4} fedavg {:.4} worst {:.4}",
            row.fitness[0], row.fitness[1], row.fitness[2], row.fitness[3], row.fitness[4]
        );
        configs.push(json!({ "rep": rep, "advisor": row.advisor_config, "genetic": row.genetic_config }));
        rows.push(row);
    }
    let column = |i: usize, f: fn(&BenchRow) -> [f64; 5]| -> Vec<f64> { rows.iter().map(|r| f(r)[i]).collect() };
    let accuracy: Vec<(f64, Option<f64>)> = (0..5).map(|i| mean_std(&column(i, |r| r.fitness))).collect();
    let seconds: Vec<f64> = (0..5).map(|i| mean_std(&column(i, |r| r.seconds)).0).collect();
    if reps < 2 {
        eprintln!("warning: standard deviations need at least two repetitions; reporting means only");
    }
    let mut csv = format!("metric,{}\n", BENCH_COLUMNS.join(","));
    let join = |v: Vec<String>| v.join(",");
    csv.push_str(&format!("mean,{}\n", join(accuracy.iter().map(|a| a.0.to_string()).collect())));
    csv.push_str(&format!(
        "std,{}\n",
        join(accuracy.iter().map(|a| a.1.map_or_else(|| "n/a".to_string(), |s| s.to_string())).collect())
    ));
    csv.push_str(&format!("mean_seconds,{}\n", join(seconds.iter().map(|s| s.to_string()).collect())));
    let table = bench_table(&accuracy, &seconds);
    dir.write("bench.csv", &csv)?;
    dir.write("bench.txt", &table)?;
    dir.write("bench_runs.csv", &runs_csv)?;
    dir.write_json("bench_configs.json", &configs)?;
    print!("{table}");
    dir.finish(
        Mode::Bench.as_str(),
        json!({
            "repetitions": reps,
            "mean": BENCH_COLUMNS.iter().zip(&accuracy).map(|(c, a)| (c.to_string(), json!(a.0))).collect::<serde_json::Map<_, _>>(),
        }),
    )
}
