//! Experiment configuration: one TOML document, with command-line flags
//! layered on top.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file, flags.
//! Every run directory stores the fully resolved document as `config.toml`,
//! which can be passed back through `--config` to repeat the run.

use std::path::{Path, PathBuf};

use fedsel_core::dataset::{LabelColumn, PartitionSpec, Scenario, SCENARIO_SEPARATION};
use fedsel_core::detect::{Thresholds, PROBE_TRAIN};
use fedsel_core::model::{TrainSettings, DEFAULT_HIDDEN};
use fedsel_core::strategies::{default_schema, validate_config_text, StrategyConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    GenData,
    Partition,
    Detect,
    Recommend,
    Run,
    Search,
    HpoRef,
    Bench,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::GenData => "gen-data",
            Mode::Partition => "partition",
            Mode::Detect => "detect",
            Mode::Recommend => "recommend",
            Mode::Run => "run",
            Mode::Search => "search",
            Mode::HpoRef => "hpo-ref",
            Mode::Bench => "bench",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default = "default_samples")]
        n_samples: usize,
        #[serde(default = "default_features")]
        n_features: usize,
        #[serde(default = "default_classes")]
        n_classes: usize,
        #[serde(default = "default_separation")]
        separation: f64,
    },
    Csv {
        path: PathBuf,
        #[serde(default = "default_label_column")]
        label_column: LabelColumn,
    },
}

fn default_samples() -> usize {
    1000
}
fn default_features() -> usize {
    10
}
fn default_classes() -> usize {
    2
}
fn default_separation() -> f64 {
    SCENARIO_SEPARATION
}
fn default_label_column() -> LabelColumn {
    LabelColumn::Name("label".into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: DEFAULT_HIDDEN.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    #[serde(default)]
    pub thresholds: Thresholds,
    /// Local training used by the outlier probe rounds.
    #[serde(default = "probe_train")]
    pub probe: TrainSettings,
}

fn probe_train() -> TrainSettings {
    PROBE_TRAIN
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { thresholds: Thresholds::default(), probe: PROBE_TRAIN }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// OpenAI-compatible chat completion endpoint.
    Http,
    /// Deterministic rule table.
    Mock,
    /// Replies replayed from a JSON file holding an array of strings.
    Script,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvisorConfig {
    pub backend: BackendKind,
    pub base_url: String,
    pub model: String,
    pub timeout_secs: u64,
    /// Free-text heterogeneity description that replaces the detected flags.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
}

impl Default for AdvisorConfig {
    fn default() -> Self {
        let http = fedsel_core::advisor::HttpSettings::default();
        Self {
            backend: BackendKind::Http,
            base_url: http.base_url,
            model: http.model,
            timeout_secs: http.timeout_secs,
            description: None,
            script: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Strategy literal such as `{'strategy_name': 'fed_prox', 'proximal_mu': 0.1}`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub generations: usize,
    pub population: usize,
    pub top_k: usize,
    /// Reference (random) search budget.
    pub trials: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { generations: 2, population: 4, top_k: 2, trials: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub repetitions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { repetitions: 10 }
    }
}

fn default_partition() -> PartitionSpec {
    PartitionSpec::new(Scenario::Iid, 4, 0)
}
fn default_rounds() -> usize {
    fedsel_core::engine::DEFAULT_ROUNDS
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Scalars come before tables so the document serialises as valid TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Run everything on one thread; results are identical either way.
    #[serde(default)]
    pub sequential: bool,
    pub data: DataSource,
    #[serde(default = "default_partition")]
    pub partition: PartitionSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub detect: DetectConfig,
    #[serde(default)]
    pub advisor: AdvisorConfig,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

/// Flag values that override config-file fields. `None` leaves the field alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub synthetic: bool,
    pub data: Option<PathBuf>,
    pub label_column: Option<String>,
    pub samples: Option<usize>,
    pub features: Option<usize>,
    pub classes: Option<usize>,
    pub separation: Option<f64>,
    pub scenario: Option<Scenario>,
    pub clients: Option<usize>,
    pub seed: Option<u64>,
    pub rounds: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub sequential: bool,
    pub strategy: Option<String>,
    pub backend: Option<BackendKind>,
    pub description: Option<String>,
    pub script: Option<PathBuf>,
    pub repetitions: Option<usize>,
}

fn section<'a>(table: &'a mut Table, key: &str) -> &'a mut Table {
    let entry = table
        .entry(key.to_string())
        .or_insert_with(|| Value::Table(Table::new()));
    if !entry.is_table() {
        *entry = Value::Table(Table::new());
    }
    entry.as_table_mut().expect("just made a table")
}

fn set(table: &mut Table, path: &str, value: Value) {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().expect("non-empty path");
    let mut t = table;
    for p in parts {
        t = section(t, p);
    }
    t.insert(last.to_string(), value);
}

fn int(v: usize) -> Value {
    Value::Integer(v as i64)
}

impl Overrides {
    fn apply(&self, table: &mut Table) -> CliResult<()> {
        if let Some(path) = &self.data {
            let mut data = Table::new();
            data.insert("source".into(), "csv".into());
            data.insert("path".into(), path.display().to_string().into());
            table.insert("data".into(), Value::Table(data));
        } else if self.synthetic {
            let is_synthetic = table
                .get("data")
                .and_then(|d| d.get("source"))
                .and_then(Value::as_str)
                == Some("synthetic");
            if !is_synthetic {
                set(table, "data", Value::Table(Table::new()));
                set(table, "data.source", "synthetic".into());
            }
        }
        let source = table
            .get("data")
            .and_then(|d| d.get("source"))
            .and_then(Value::as_str)
            .map(str::to_string);
        let synthetic_flags = [
            ("n_samples", self.samples.map(int)),
            ("n_features", self.features.map(int)),
            ("n_classes", self.classes.map(int)),
            ("separation", self.separation.map(Value::Float)),
        ];
        for (key, value) in synthetic_flags {
            if let Some(v) = value {
                if source.as_deref() != Some("synthetic") {
                    return Err(CliError::Usage(format!(
                        "data.{key} applies to synthetic data only; pass --synthetic or set data.source = \"synthetic\""
                    )));
                }
                set(table, &format!("data.{key}"), v);
            }
        }
        if let Some(col) = &self.label_column {
            if source.as_deref() != Some("csv") {
                return Err(CliError::Usage("--label-column needs a CSV data source".into()));
            }
            let v = match LabelColumn::parse(col) {
                LabelColumn::Index(i) => int(i),
                LabelColumn::Name(n) => n.into(),
            };
            set(table, "data.label_column", v);
        }
        if let Some(s) = self.scenario {
            set(table, "partition.scenario", s.as_str().into());
        }
        if let Some(n) = self.clients {
            set(table, "partition.n_clients", int(n));
        }
        if let Some(s) = self.seed {
            set(table, "seed", Value::Integer(s as i64));
        }
        if let Some(r) = self.rounds {
            set(table, "rounds", int(r));
        }
        if let Some(o) = &self.output_dir {
            set(table, "output_dir", o.display().to_string().into());
        }
        if self.sequential {
            set(table, "sequential", true.into());
        }
        if let Some(s) = &self.strategy {
            set(table, "run.strategy", s.clone().into());
        }
        if let Some(b) = self.backend {
            let name = match b {
                BackendKind::Http => "http",
                BackendKind::Mock => "mock",
                BackendKind::Script => "script",
            };
            set(table, "advisor.backend", name.into());
        }
        if let Some(d) = &self.description {
            set(table, "advisor.description", d.clone().into());
        }
        if let Some(p) = &self.script {
            set(table, "advisor.script", p.display().to_string().into());
        }
        if let Some(r) = self.repetitions {
            set(table, "bench.repetitions", int(r));
        }
        Ok(())
    }
}

pub fn read_table(path: &Path) -> CliResult<Table> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    text.parse::<Table>()
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

impl ExperimentConfig {
    /// Resolves the config file (if any) and flag overrides into a validated
    /// configuration for `mode`.
    pub fn load(file: Option<&Path>, overrides: &Overrides, mode: Mode) -> CliResult<Self> {
        let mut table = match file {
            Some(p) => read_table(p)?,
            None => Table::new(),
        };
        overrides.apply(&mut table)?;
        if !table.contains_key("data") {
            return Err(CliError::Usage(
                "no data source: pass --synthetic or --data <csv>, or add a [data] table to the config file".into(),
            ));
        }
        set(&mut table, "mode", mode_value(mode));
        let seed = table.get("seed").cloned().unwrap_or(Value::Integer(0));
        let mut spec = default_partition();
        spec.seed = seed.as_integer().unwrap_or(0) as u64;
        let Value::Table(mut partition) = Value::try_from(&spec).map_err(|e| CliError::Internal(e.to_string()))?
        else {
            unreachable!("a struct serialises to a table")
        };
        match table.remove("partition") {
            Some(Value::Table(given)) => partition.extend(given),
            Some(other) => return Err(CliError::Validation(format!("partition: expected a table, found {}", other.type_str()))),
            None => {}
        }
        table.insert("partition".into(), Value::Table(partition));
        let config: ExperimentConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Validation(format!("config: {}", e.message())))?;
        config.validate(mode)?;
        Ok(config)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Internal(format!("serialising config: {e}")))
    }

    pub fn n_clients(&self) -> usize {
        self.partition.n_clients
    }

    pub fn parallel(&self) -> bool {
        !self.sequential
    }

    /// The strategy to execute for `run`, checked against the schema.
    pub fn run_strategy(&self) -> CliResult<StrategyConfig> {
        let text = self.run.strategy.as_deref().ok_or_else(|| {
            CliError::Usage("run needs a strategy: pass --strategy or set run.strategy".into())
        })?;
        validate_config_text(text, &default_schema(), self.n_clients())
            .map_err(|e| CliError::validation("run.strategy", e))
    }

    /// Field-level checks; messages start with the offending field path.
    pub fn validate(&self, mode: Mode) -> CliResult<()> {
        let bad = |path: &str, msg: String| Err(CliError::Validation(format!("{path}: {msg}")));
        match &self.data {
            DataSource::Synthetic { n_samples, n_features, n_classes, separation } => {
                if *n_features == 0 {
                    return bad("data.n_features", "must be positive".into());
                }
                if *n_classes < 2 {
                    return bad("data.n_classes", format!("{n_classes} < 2"));
                }
                if n_samples < n_classes {
                    return bad("data.n_samples", format!("{n_samples} is fewer than the {n_classes} classes"));
                }
                if !(separation.is_finite() && *separation >= 0.0) {
                    return bad("data.separation", format!("{separation} must be finite and >= 0"));
                }
            }
            DataSource::Csv { path, .. } => {
                if !path.exists() {
                    return bad("data.path", format!("{} does not exist", path.display()));
                }
            }
        }
        if let Err(e) = self.partition.validate() {
            return bad("partition", e.to_string());
        }
        let min_clients = match mode {
            Mode::GenData | Mode::Partition => 1,
            Mode::Run | Mode::Search | Mode::HpoRef => 2,
            Mode::Detect | Mode::Recommend | Mode::Bench => 3,
        };
        if self.partition.n_clients < min_clients {
            return bad(
                "partition.n_clients",
                format!("{} needs at least {min_clients} clients", mode.as_str()),
            );
        }
        if self.model.hidden.contains(&0) {
            return bad("model.hidden", "layer widths must be positive".into());
        }
        if let Err(e) = self.train.validate() {
            return bad("train", e.to_string());
        }
        if let Err(e) = self.detect.probe.validate() {
            return bad("detect.probe", e.to_string());
        }
        let t = &self.detect.thresholds;
        if t.repetitions == 0 || t.rep_threshold == 0 || t.rep_threshold > t.repetitions {
            return bad(
                "detect.thresholds",
                format!("need 1 <= rep_threshold <= repetitions, got {} of {}", t.rep_threshold, t.repetitions),
            );
        }
        if !(0.0..=100.0).contains(&t.percentile) {
            return bad("detect.thresholds.percentile", format!("{} outside [0, 100]", t.percentile));
        }
        if self.rounds == 0 {
            return bad("rounds", "must be positive".into());
        }
        if matches!(mode, Mode::Search | Mode::HpoRef | Mode::Bench) && self.rounds < 5 {
            return bad("rounds", format!("{} is below the five-round fitness window", self.rounds));
        }
        let s = &self.search;
        for (name, v) in [
            ("search.generations", s.generations),
            ("search.population", s.population),
            ("search.top_k", s.top_k),
            ("search.trials", s.trials),
            ("bench.repetitions", self.bench.repetitions),
        ] {
            if v == 0 {
                return bad(name, "must be positive".into());
            }
        }
        if self.advisor.backend == BackendKind::Script && self.advisor.script.is_none() {
            return bad("advisor.script", "the script backend needs a reply file".into());
        }
        if let Some(text) = &self.run.strategy {
            if let Err(e) = validate_config_text(text, &default_schema(), self.n_clients()) {
                return bad("run.strategy", e.to_string());
            }
        }
        Ok(())
    }
}

fn mode_value(mode: Mode) -> Value {
    Value::try_from(mode).expect("unit enum serialises to a string")
}
