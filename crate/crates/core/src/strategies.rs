//! Server-side aggregation strategies, their typed configurations, and the
//! schema that bounds search and validates advisor output.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ClientUpdate, ModelParams};

/// Decimal places kept by canonical real parameter values.
pub const DECIMALS: i32 = 4;

pub fn round_decimals(x: f64) -> f64 {
    let scale = 10f64.powi(DECIMALS);
    (x * scale).round() / scale
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    FedAvg,
    FedProx,
    FedTrimmedAvg,
    FedMedian,
    Krum,
}

impl StrategyName {
    pub const ALL: [StrategyName; 5] = [
        StrategyName::FedAvg,
        StrategyName::FedProx,
        StrategyName::FedTrimmedAvg,
        StrategyName::FedMedian,
        StrategyName::Krum,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyName::FedAvg => "fed_avg",
            StrategyName::FedProx => "fed_prox",
            StrategyName::FedTrimmedAvg => "fed_trimmed_avg",
            StrategyName::FedMedian => "fed_median",
            StrategyName::Krum => "krum",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|n| n.as_str() == s)
    }
}

impl fmt::Display for StrategyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Real(f64),
}

impl ParamValue {
    pub fn as_f64(self) -> f64 {
        match self {
            ParamValue::Int(i) => i as f64,
            ParamValue::Real(r) => r,
        }
    }

    /// Python-literal rendering: integers bare, reals always with a decimal point.
    pub fn literal(self) -> String {
        match self {
            ParamValue::Int(i) => i.to_string(),
            ParamValue::Real(r) => format!("{r:?}"),
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.literal())
    }
}

/// A configuration as written by a user or a model, before validation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawConfig {
    pub strategy_name: String,
    pub params: BTreeMap<String, ParamValue>,
}

/// A validated, canonical strategy configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyConfig {
    name: StrategyName,
    params: BTreeMap<String, ParamValue>,
}

impl StrategyConfig {
    pub fn fed_avg() -> Self {
        Self {
            name: StrategyName::FedAvg,
            params: BTreeMap::new(),
        }
    }

    pub fn fed_median() -> Self {
        Self {
            name: StrategyName::FedMedian,
            params: BTreeMap::new(),
        }
    }

    pub fn fed_prox(mu: f64) -> Self {
        Self::unchecked(StrategyName::FedProx, [("proximal_mu", ParamValue::Real(mu))])
    }

    pub fn fed_trimmed_avg(beta: f64) -> Self {
        Self::unchecked(StrategyName::FedTrimmedAvg, [("beta", ParamValue::Real(beta))])
    }

    pub fn krum(num_malicious: i64, num_to_keep: i64) -> Self {
        Self::unchecked(
            StrategyName::Krum,
            [
                ("num_malicious_clients", ParamValue::Int(num_malicious)),
                ("num_clients_to_keep", ParamValue::Int(num_to_keep)),
            ],
        )
    }

    /// Builds a config without schema checks; reals are still rounded.
    /// Run it through [`validate_config`] before trusting it.
    pub fn unchecked<'a>(
        name: StrategyName,
        params: impl IntoIterator<Item = (&'a str, ParamValue)>,
    ) -> Self {
        let params = params
            .into_iter()
            .map(|(k, v)| {
                let v = match v {
                    ParamValue::Real(r) => ParamValue::Real(round_decimals(r)),
                    other => other,
                };
                (k.to_string(), v)
            })
            .collect();
        Self { name, params }
    }

    pub fn name(&self) -> StrategyName {
        self.name
    }

    pub fn params(&self) -> &BTreeMap<String, ParamValue> {
        &self.params
    }

    pub fn get(&self, key: &str) -> Option<ParamValue> {
        self.params.get(key).copied()
    }

    fn real(&self, key: &str) -> f64 {
        self.get(key).map(ParamValue::as_f64).unwrap_or(0.0)
    }

    fn int(&self, key: &str) -> i64 {
        match self.get(key) {
            Some(ParamValue::Int(i)) => i,
            Some(ParamValue::Real(r)) => r as i64,
            None => 0,
        }
    }

    /// Client-side proximal coefficient; zero for every strategy but fed_prox.
    pub fn proximal_mu(&self) -> f64 {
        if self.name == StrategyName::FedProx {
            self.real("proximal_mu")
        } else {
            0.0
        }
    }

    pub fn to_raw(&self) -> RawConfig {
        RawConfig {
            strategy_name: self.name.as_str().to_string(),
            params: self.params.clone(),
        }
    }

    /// Single-quoted dictionary literal with `strategy_name` first and the
    /// remaining keys sorted, e.g. `{'strategy_name': 'fed_prox', 'proximal_mu': 0.7}`.
    pub fn to_literal(&self) -> String {
        let mut out = format!("{{'strategy_name': '{}'", self.name);
        for (k, v) in &self.params {
            out.push_str(&format!(", '{k}': {}", v.literal()));
        }
        out.push('}');
        out
    }

    /// Compact JSON with lexicographically sorted keys; the hashing form.
    pub fn to_canonical_json(&self) -> String {
        let mut map = serde_json::Map::new();
        for (k, v) in &self.params {
            let value = match v {
                ParamValue::Int(i) => serde_json::Value::from(*i),
                ParamValue::Real(r) => serde_json::Value::from(*r),
            };
            map.insert(k.clone(), value);
        }
        map.insert("strategy_name".into(), self.name.as_str().into());
        // serde_json's default Map is a BTreeMap, so keys come out sorted
        serde_json::Value::Object(map).to_string()
    }
}

impl fmt::Display for StrategyConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_literal())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Int,
    Real,
}

/// A domain endpoint, either fixed or relative to the client count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    Fixed(f64),
    /// `n_clients - k`
    ClientsMinus(i64),
}

impl Bound {
    pub fn resolve(self, n_clients: usize) -> f64 {
        match self {
            Bound::Fixed(v) => v,
            Bound::ClientsMinus(k) => n_clients as f64 - k as f64,
        }
    }

    fn depends_on_n(self) -> bool {
        matches!(self, Bound::ClientsMinus(_))
    }

    fn describe(self) -> String {
        match self {
            Bound::Fixed(v) => format!("{v}"),
            Bound::ClientsMinus(0) => "n".into(),
            Bound::ClientsMinus(k) => format!("n-{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub low: Bound,
    pub high: Bound,
    pub default: Bound,
}

impl ParamSpec {
    pub fn domain(&self, n_clients: usize) -> (f64, f64) {
        (self.low.resolve(n_clients), self.high.resolve(n_clients))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub name: StrategyName,
    pub params: Vec<ParamSpec>,
}

impl StrategySpec {
    /// Whether every parameter domain is non-empty for this client count.
    pub fn feasible(&self, n_clients: usize) -> bool {
        self.params.iter().all(|p| {
            let (lo, hi) = p.domain(n_clients);
            match p.kind {
                ParamKind::Int => lo.ceil() <= hi.floor(),
                ParamKind::Real => lo <= hi,
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySchema {
    pub strategies: Vec<StrategySpec>,
}

impl StrategySchema {
    pub fn spec(&self, name: StrategyName) -> Option<&StrategySpec> {
        self.strategies.iter().find(|s| s.name == name)
    }

    pub fn feasible_strategies(&self, n_clients: usize) -> Vec<&StrategySpec> {
        self.strategies.iter().filter(|s| s.feasible(n_clients)).collect()
    }

    /// Default configuration of one strategy for `n_clients`, with each
    /// default clamped into its resolved domain. `None` if the strategy is
    /// unknown or infeasible for this client count.
    pub fn default_config(&self, name: StrategyName, n_clients: usize) -> Option<StrategyConfig> {
        let spec = self.spec(name)?;
        if !spec.feasible(n_clients) {
            return None;
        }
        Some(StrategyConfig::unchecked(
            name,
            spec.params.iter().map(|p| {
                let (lo, hi) = p.domain(n_clients);
                let v = p.default.resolve(n_clients).clamp(lo, hi);
                let v = match p.kind {
                    ParamKind::Int => ParamValue::Int(v as i64),
                    ParamKind::Real => ParamValue::Real(v),
                };
                (p.name.as_str(), v)
            }),
        ))
    }

    /// Human-readable listing with domains resolved for `n_clients`, one
    /// strategy per line. Embedded in the advisor's system prompt.
    pub fn render(&self, n_clients: usize) -> String {
        let mut lines = Vec::with_capacity(self.strategies.len());
        for s in &self.strategies {
            if s.params.is_empty() {
                lines.push(format!("- '{}': no parameters", s.name));
                continue;
            }
            let params: Vec<String> = s
                .params
                .iter()
                .map(|p| {
                    let (lo, hi) = p.domain(n_clients);
                    let kind = match p.kind {
                        ParamKind::Int => "int",
                        ParamKind::Real => "float",
                    };
                    let fmt_v = |v: f64| match p.kind {
                        ParamKind::Int => format!("{}", v as i64),
                        ParamKind::Real => format!("{v:?}"),
                    };
                    format!(
                        "'{}' ({kind} in [{}, {}], default {})",
                        p.name,
                        fmt_v(lo),
                        fmt_v(hi),
                        fmt_v(p.default.resolve(n_clients))
                    )
                })
                .collect();
            lines.push(format!("- '{}': {}", s.name, params.join(", ")));
        }
        lines.join("\n")
    }

    /// Domains with symbolic client-count bounds, for documentation.
    pub fn describe(&self) -> String {
        let mut lines = Vec::new();
        for s in &self.strategies {
            let params: Vec<String> = s
                .params
                .iter()
                .map(|p| {
                    format!(
                        "{} [{}, {}] default {}",
                        p.name,
                        p.low.describe(),
                        p.high.describe(),
                        p.default.describe()
                    )
                })
                .collect();
            lines.push(format!("{}: {}", s.name, params.join("; ")));
        }
        lines.join("\n")
    }
}

impl Default for StrategySchema {
    fn default() -> Self {
        default_schema()
    }
}

pub fn default_schema() -> StrategySchema {
    let real = |name: &str, lo: f64, hi: f64, default: f64| ParamSpec {
        name: name.into(),
        kind: ParamKind::Real,
        low: Bound::Fixed(lo),
        high: Bound::Fixed(hi),
        default: Bound::Fixed(default),
    };
    StrategySchema {
        strategies: vec![
            StrategySpec {
                name: StrategyName::FedAvg,
                params: vec![],
            },
            StrategySpec {
                name: StrategyName::FedProx,
                params: vec![real("proximal_mu", 0.0, 1.0, 0.1)],
            },
            StrategySpec {
                name: StrategyName::FedTrimmedAvg,
                params: vec![real("beta", 0.0, 0.49, 0.2)],
            },
            StrategySpec {
                name: StrategyName::FedMedian,
                params: vec![],
            },
            StrategySpec {
                name: StrategyName::Krum,
                params: vec![
                    ParamSpec {
                        name: "num_malicious_clients".into(),
                        kind: ParamKind::Int,
                        low: Bound::Fixed(0.0),
                        high: Bound::ClientsMinus(3),
                        default: Bound::Fixed(1.0),
                    },
                    ParamSpec {
                        name: "num_clients_to_keep".into(),
                        kind: ParamKind::Int,
                        low: Bound::Fixed(1.0),
                        high: Bound::ClientsMinus(0),
                        default: Bound::ClientsMinus(1),
                    },
                ],
            },
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("unparseable configuration: {0}")]
    Unparseable(String),
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
    #[error("unknown parameter `{param}` for strategy `{strategy}`")]
    UnknownParameter { strategy: String, param: String },
    #[error("missing parameter `{param}` for strategy `{strategy}`")]
    MissingParameter { strategy: String, param: String },
    #[error("parameter `{param}` must be {expected}, got {value}")]
    WrongType {
        param: String,
        expected: &'static str,
        value: String,
    },
    #[error("parameter `{param}` = {value} outside [{low}, {high}]")]
    OutOfDomain {
        param: String,
        value: String,
        low: f64,
        high: f64,
    },
    #[error("parameter `{param}` = {value} infeasible for {n_clients} clients: {reason}")]
    InfeasibleForN {
        param: String,
        value: String,
        n_clients: usize,
        reason: String,
    },
}

/// Checks a raw configuration against the schema for `n_clients` and returns
/// its canonical form: reals rounded to four decimals, integral reals in
/// integer slots converted, integers in real slots widened.
pub fn validate_config(
    raw: &RawConfig,
    schema: &StrategySchema,
    n_clients: usize,
) -> Result<StrategyConfig, ConfigError> {
    let name = StrategyName::parse(&raw.strategy_name)
        .ok_or_else(|| ConfigError::UnknownStrategy(raw.strategy_name.clone()))?;
    let spec = schema
        .spec(name)
        .ok_or_else(|| ConfigError::UnknownStrategy(raw.strategy_name.clone()))?;
    let known: BTreeSet<&str> = spec.params.iter().map(|p| p.name.as_str()).collect();
    if let Some(extra) = raw.params.keys().find(|k| !known.contains(k.as_str())) {
        return Err(ConfigError::UnknownParameter {
            strategy: name.to_string(),
            param: extra.clone(),
        });
    }
    let mut params = BTreeMap::new();
    for p in &spec.params {
        let value = raw.params.get(&p.name).ok_or_else(|| ConfigError::MissingParameter {
            strategy: name.to_string(),
            param: p.name.clone(),
        })?;
        let value = coerce(p, *value)?;
        let v = value.as_f64();
        let (lo, hi) = p.domain(n_clients);
        if v < lo || v > hi {
            let fixed_lo = if p.low.depends_on_n() { f64::NEG_INFINITY } else { lo };
            let fixed_hi = if p.high.depends_on_n() { f64::INFINITY } else { hi };
            if v < fixed_lo || v > fixed_hi {
                return Err(ConfigError::OutOfDomain {
                    param: p.name.clone(),
                    value: value.literal(),
                    low: lo,
                    high: hi,
                });
            }
            return Err(ConfigError::InfeasibleForN {
                param: p.name.clone(),
                value: value.literal(),
                n_clients,
                reason: format!("allowed range for this client count is [{lo}, {hi}]"),
            });
        }
        params.insert(p.name.clone(), value);
    }
    let config = StrategyConfig { name, params };
    check_feasible(&config, n_clients)?;
    Ok(config)
}

fn coerce(spec: &ParamSpec, value: ParamValue) -> Result<ParamValue, ConfigError> {
    let wrong = |expected| ConfigError::WrongType {
        param: spec.name.clone(),
        expected,
        value: value.literal(),
    };
    match (spec.kind, value) {
        (ParamKind::Int, ParamValue::Int(_)) => Ok(value),
        (ParamKind::Int, ParamValue::Real(r)) if r.fract() == 0.0 && r.abs() < 1e15 => {
            Ok(ParamValue::Int(r as i64))
        }
        (ParamKind::Int, ParamValue::Real(_)) => Err(wrong("an integer")),
        (ParamKind::Real, ParamValue::Real(r)) if r.is_finite() => {
            Ok(ParamValue::Real(round_decimals(r)))
        }
        (ParamKind::Real, ParamValue::Real(_)) => Err(wrong("a finite real")),
        (ParamKind::Real, ParamValue::Int(i)) => Ok(ParamValue::Real(i as f64)),
    }
}

/// Client-count constraints the aggregators themselves need.
fn check_feasible(config: &StrategyConfig, n: usize) -> Result<(), ConfigError> {
    let n_i = n as i64;
    match config.name {
        StrategyName::Krum => {
            let f = config.int("num_malicious_clients");
            let m = config.int("num_clients_to_keep");
            if n_i - f - 2 < 1 {
                return Err(ConfigError::InfeasibleForN {
                    param: "num_malicious_clients".into(),
                    value: f.to_string(),
                    n_clients: n,
                    reason: format!("krum needs n - f - 2 >= 1, got {}", n_i - f - 2),
                });
            }
            if m < 1 || m > n_i {
                return Err(ConfigError::InfeasibleForN {
                    param: "num_clients_to_keep".into(),
                    value: m.to_string(),
                    n_clients: n,
                    reason: format!("krum keeps between 1 and {n} updates"),
                });
            }
        }
        StrategyName::FedTrimmedAvg => {
            let beta = config.real("beta");
            let trim = (beta * n as f64).floor() as usize;
            if n < 2 * trim + 1 {
                return Err(ConfigError::InfeasibleForN {
                    param: "beta".into(),
                    value: format!("{beta:?}"),
                    n_clients: n,
                    reason: "trimming leaves no values".into(),
                });
            }
        }
        _ => {}
    }
    Ok(())
}

/// Parses the textual form and validates it.
pub fn validate_config_text(
    text: &str,
    schema: &StrategySchema,
    n_clients: usize,
) -> Result<StrategyConfig, ConfigError> {
    let raw = crate::advisor::parse_config_text(text)?;
    validate_config(&raw, schema, n_clients)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AggregateError {
    #[error("no client updates to aggregate")]
    NoUpdates,
    #[error("update from client {0} does not match the global model shape")]
    ShapeMismatch(usize),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Combines client updates into new global parameters.
///
/// Updates are put in client-id order first, so results do not depend on
/// arrival order. Means are clamped into the range of the averaged values
/// (a mean of identical values is that value).
pub fn aggregate(
    config: &StrategyConfig,
    updates: &[ClientUpdate],
    global: &ModelParams,
) -> Result<ModelParams, AggregateError> {
    if updates.is_empty() {
        return Err(AggregateError::NoUpdates);
    }
    if let Some(bad) = updates.iter().find(|u| !u.params.same_shape(global)) {
        return Err(AggregateError::ShapeMismatch(bad.client_id));
    }
    check_feasible(config, updates.len())?;
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    let out = match config.name {
        StrategyName::FedAvg | StrategyName::FedProx => weighted_mean(&ordered),
        StrategyName::FedMedian => coordinate_wise(&ordered, median),
        StrategyName::FedTrimmedAvg => {
            let trim = (config.real("beta") * ordered.len() as f64).floor() as usize;
            coordinate_wise(&ordered, |v| trimmed_mean(v, trim))
        }
        StrategyName::Krum => {
            let f = config.int("num_malicious_clients") as usize;
            let m = config.int("num_clients_to_keep") as usize;
            let kept = krum_select(&ordered, f, m);
            let kept: Vec<&ClientUpdate> = kept.into_iter().map(|i| ordered[i]).collect();
            weighted_mean(&kept)
        }
    };
    Ok(out)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Example-count weighted mean. Counts are reduced by their gcd, so equal
/// counts give the plain arithmetic mean.
fn weighted_mean(updates: &[&ClientUpdate]) -> ModelParams {
    let g = updates.iter().fold(0, |acc, u| gcd(acc, u.num_examples)).max(1);
    let weights: Vec<f64> = updates
        .iter()
        .map(|u| (u.num_examples / g) as f64)
        .collect();
    let total: f64 = weights.iter().sum();
    let flats: Vec<Vec<f64>> = updates.iter().map(|u| u.params.flatten()).collect();
    updates[0].params.map_flat(|i| {
        let mut acc = 0.0;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (flat, w) in flats.iter().zip(&weights) {
            let v = flat[i];
            acc += w * v;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (acc / total).clamp(lo, hi)
    })
}

fn coordinate_wise(updates: &[&ClientUpdate], f: impl Fn(&mut [f64]) -> f64) -> ModelParams {
    let flats: Vec<Vec<f64>> = updates.iter().map(|u| u.params.flatten()).collect();
    let mut column = vec![0.0; flats.len()];
    updates[0].params.map_flat(|i| {
        for (c, flat) in column.iter_mut().zip(&flats) {
            *c = flat[i];
        }
        f(&mut column)
    })
}

/// Middle value; the mean of the two middle values for even counts.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        let (a, b) = (values[n / 2 - 1], values[n / 2]);
        (a + b) / 2.0
    }
}

/// Mean after dropping `trim` values from each end.
pub fn trimmed_mean(values: &mut [f64], trim: usize) -> f64 {
    values.sort_by(f64::total_cmp);
    let kept = &values[trim..values.len() - trim];
    let total: f64 = kept.iter().sum();
    (total / kept.len() as f64).clamp(kept[0], kept[kept.len() - 1])
}

fn squared_distance(a: &ModelParams, b: &ModelParams) -> f64 {
    a.layers()
        .iter()
        .flatten()
        .zip(b.layers().iter().flatten())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Krum scores: for each update, the sum of squared distances to its
/// `n - f - 2` nearest other updates (nearest first).
pub fn krum_scores(updates: &[&ClientUpdate], f: usize) -> Vec<f64> {
    let n = updates.len();
    let neighbours = n.saturating_sub(f + 2);
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = squared_distance(&updates[i].params, &updates[j].params);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    (0..n)
        .map(|i| {
            let mut others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
            others.sort_by(f64::total_cmp);
            others[..neighbours].iter().sum()
        })
        .collect()
}

/// Positions of the `m` lowest-scoring updates, ties to the earlier position.
fn krum_select(updates: &[&ClientUpdate], f: usize, m: usize) -> Vec<usize> {
    let scores = krum_scores(updates, f);
    let mut idx: Vec<usize> = (0..updates.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx.truncate(m);
    idx.sort_unstable();
    idx
}
