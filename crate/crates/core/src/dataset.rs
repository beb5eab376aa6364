//! Tabular classification data: synthetic generation, CSV ingestion, and
//! per-client partitioning for each simulated heterogeneity scenario.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, rng_for};

/// Default distance between class means. Gives a Bayes accuracy of about
/// 0.93 for two classes.
pub const DEFAULT_SEPARATION: f64 = 3.0;

/// Separation of the benchmark scenarios: a harder task (Bayes accuracy
/// about 0.73) where 30 rounds do not saturate every strategy.
pub const SCENARIO_SEPARATION: f64 = 1.2;

const DIRICHLET_MAX_ATTEMPTS: u64 = 100;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("need at least {needed} samples, have {available}")]
    TooFewSamples { needed: usize, available: usize },
    #[error("class {class} exhausted while filling client {client}: needed {needed}, {available} left")]
    PoolExhausted {
        class: usize,
        client: usize,
        needed: usize,
        available: usize,
    },
    #[error("dirichlet partition left a client empty after {0} attempts")]
    EmptyClient(u64),
    #[error("expected {expected} entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("operation requires binary labels, found class {0}")]
    NotBinary(usize),
    #[error("unknown client {0}")]
    UnknownClient(usize),
    #[error("invalid partition parameter: {0}")]
    InvalidParam(String),
    #[error("csv parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("unknown label column `{0}`")]
    UnknownLabelColumn(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Row-major feature matrix plus integer class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Vec<f64>,
    n_features: usize,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        n_features: usize,
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self, DatasetError> {
        if n_features == 0 {
            return Err(DatasetError::Invalid("zero features".into()));
        }
        if features.len() != labels.len() * n_features {
            return Err(DatasetError::Invalid(format!(
                "{} feature values for {} rows of width {}",
                features.len(),
                labels.len(),
                n_features
            )));
        }
        if n_classes < 2 {
            return Err(DatasetError::Invalid("need at least two classes".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(DatasetError::Invalid(format!(
                "label {bad} outside 0..{n_classes}"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(DatasetError::Invalid("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            n_features,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.n_features)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// New dataset holding the given rows, in order. Class count is kept.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            n_features: self.n_features,
            labels,
            n_classes: self.n_classes,
        }
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut pools = vec![Vec::new(); self.n_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            pools[l].push(i);
        }
        pools
    }

    fn ensure_binary(&self) -> Result<(), DatasetError> {
        match self.labels.iter().find(|&&l| l > 1) {
            Some(&l) => Err(DatasetError::NotBinary(l)),
            None => Ok(()),
        }
    }

    /// Writes a header row (`x0..x{d-1},label`) followed by one row per sample.
    pub fn write_csv(&self, path: &Path) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.n_features).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (row, label) in self.rows().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            rec.push(label.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub client_id: usize,
    pub data: Dataset,
}

/// Class-conditional Gaussian clusters with unit variance. Class `k` is
/// centred at `separation / sqrt(2)` along axis `k mod d`, negated for every
/// second wrap, so distinct classes sit `separation` apart when `K <= 2d`.
pub fn generate_synthetic(
    n_samples: usize,
    n_features: usize,
    n_classes: usize,
    seed: u64,
) -> Result<Dataset, DatasetError> {
    generate_synthetic_with(n_samples, n_features, n_classes, DEFAULT_SEPARATION, seed)
}

pub fn generate_synthetic_with(
    n_samples: usize,
    n_features: usize,
    n_classes: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset, DatasetError> {
    if n_features == 0 || n_classes < 2 {
        return Err(DatasetError::Invalid(
            "need n_features >= 1 and n_classes >= 2".into(),
        ));
    }
    if n_samples < n_classes {
        return Err(DatasetError::TooFewSamples {
            needed: n_classes,
            available: n_samples,
        });
    }
    let mut rng = rng_for(seed, "synthetic", &[]);
    let mut labels: Vec<usize> = (0..n_samples).map(|i| i % n_classes).collect();
    labels.shuffle(&mut rng);

    let offset = separation / std::f64::consts::SQRT_2;
    let centre = |class: usize| -> (usize, f64) {
        let axis = class % n_features;
        let sign = if (class / n_features).is_multiple_of(2) { 1.0 } else { -1.0 };
        (axis, sign * offset)
    };
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut features = Vec::with_capacity(n_samples * n_features);
    for &label in &labels {
        let (axis, shift) = centre(label);
        for j in 0..n_features {
            let mut v = normal.sample(&mut rng);
            if j == axis {
                v += shift;
            }
            features.push(v);
        }
    }
    Dataset::new(features, n_features, labels, n_classes)
}

/// Which column of a CSV file holds the label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

impl LabelColumn {
    /// Numeric strings select by index; anything else by header name.
    pub fn parse(s: &str) -> Self {
        match s.parse::<usize>() {
            Ok(i) => LabelColumn::Index(i),
            Err(_) => LabelColumn::Name(s.to_string()),
        }
    }
}

/// Loads a comma-delimited file with a header row. Label values are
/// re-encoded to `0..K` in first-seen order.
pub fn load_csv(path: &Path, label_column: &LabelColumn) -> Result<Dataset, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let label_idx = match label_column {
        LabelColumn::Index(i) if *i < headers.len() => *i,
        LabelColumn::Index(i) => return Err(DatasetError::UnknownLabelColumn(i.to_string())),
        LabelColumn::Name(name) => headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DatasetError::UnknownLabelColumn(name.clone()))?,
    };
    let n_features = headers.len() - 1;
    let mut encoding: HashMap<String, usize> = HashMap::new();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (r, record) in reader.records().enumerate() {
        // header is line 1
        let row = r + 2;
        let record = record?;
        if record.len() != headers.len() {
            let column = headers
                .get(record.len())
                .cloned()
                .unwrap_or_else(|| format!("#{}", record.len()));
            return Err(DatasetError::Parse {
                row,
                column,
                message: format!("expected {} cells, found {}", headers.len(), record.len()),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if cell.is_empty() {
                return Err(DatasetError::Parse {
                    row,
                    column: headers[c].clone(),
                    message: "missing value".into(),
                });
            }
            if c == label_idx {
                let next = encoding.len();
                labels.push(*encoding.entry(cell.to_string()).or_insert(next));
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| DatasetError::Parse {
                row,
                column: headers[c].clone(),
                message: format!("non-numeric value `{cell}`"),
            })?;
            if !v.is_finite() {
                return Err(DatasetError::Parse {
                    row,
                    column: headers[c].clone(),
                    message: format!("non-finite value `{cell}`"),
                });
            }
            features.push(v);
        }
    }
    let n_classes = encoding.len().max(2);
    Dataset::new(features, n_features, labels, n_classes)
}

/// Stratified random split: each class is shuffled and dealt round-robin,
/// with the dealing offset carried across classes so totals stay balanced.
pub fn partition_iid(
    dataset: &Dataset,
    n_clients: usize,
    seed: u64,
) -> Result<Vec<ClientPartition>, DatasetError> {
    if n_clients == 0 {
        return Err(DatasetError::InvalidParam("n_clients must be positive".into()));
    }
    if dataset.len() < n_clients {
        return Err(DatasetError::TooFewSamples {
            needed: n_clients,
            available: dataset.len(),
        });
    }
    let mut rng = rng_for(seed, "partition_iid", &[]);
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    let mut next = 0usize;
    for mut pool in dataset.indices_by_class() {
        pool.shuffle(&mut rng);
        for idx in pool {
            assigned[next % n_clients].push(idx);
            next += 1;
        }
    }
    Ok(build_partitions(dataset, assigned))
}

/// Client `i` receives `round(proportions[i] * client_size)` class-1 samples
/// and the rest class 0, drawn without replacement from shuffled pools.
pub fn partition_label_skew(
    dataset: &Dataset,
    proportions: &[f64],
    client_size: usize,
    seed: u64,
) -> Result<Vec<ClientPartition>, DatasetError> {
    dataset.ensure_binary()?;
    if client_size == 0 || proportions.is_empty() {
        return Err(DatasetError::InvalidParam(
            "label skew needs proportions and a positive client size".into(),
        ));
    }
    if let Some(p) = proportions.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(DatasetError::InvalidParam(format!(
            "proportion {p} outside (0, 1)"
        )));
    }
    let mut rng = rng_for(seed, "partition_label_skew", &[]);
    let mut pools = dataset.indices_by_class();
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let mut assigned = Vec::with_capacity(proportions.len());
    for (client, &p) in proportions.iter().enumerate() {
        let ones = (p * client_size as f64).round() as usize;
        let wanted = [client_size - ones, ones];
        let mut take = Vec::with_capacity(client_size);
        for (class, &needed) in wanted.iter().enumerate() {
            let pool = &mut pools[class];
            if pool.len() < needed {
                return Err(DatasetError::PoolExhausted {
                    class,
                    client,
                    needed,
                    available: pool.len(),
                });
            }
            take.extend(pool.drain(pool.len() - needed..));
        }
        take.shuffle(&mut rng);
        assigned.push(take);
    }
    Ok(build_partitions(dataset, assigned))
}

/// Per-class Dirichlet(alpha) proportions over clients, then a multinomial
/// assignment of that class's samples. Retries with fresh derived seeds
/// while any client ends up empty.
pub fn partition_dirichlet(
    dataset: &Dataset,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ClientPartition>, DatasetError> {
    if dataset.is_empty() {
        return Err(DatasetError::TooFewSamples {
            needed: 1,
            available: 0,
        });
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(DatasetError::InvalidParam(format!("alpha {alpha} must be > 0")));
    }
    if n_clients == 0 {
        return Err(DatasetError::InvalidParam("n_clients must be positive".into()));
    }
    let pools = dataset.indices_by_class();
    for attempt in 0..DIRICHLET_MAX_ATTEMPTS {
        let mut rng = rng_for(seed, "partition_dirichlet", &[attempt]);
        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
        for pool in &pools {
            let shares = sample_dirichlet(&mut rng, alpha, n_clients);
            let mut cumulative = Vec::with_capacity(n_clients);
            let mut acc = 0.0;
            for s in &shares {
                acc += s;
                cumulative.push(acc);
            }
            for &idx in pool {
                let u: f64 = rng.random::<f64>() * acc;
                let client = cumulative
                    .iter()
                    .position(|&c| u < c)
                    .unwrap_or(n_clients - 1);
                assigned[client].push(idx);
            }
        }
        if assigned.iter().all(|a| !a.is_empty()) {
            for a in &mut assigned {
                a.shuffle(&mut rng);
            }
            return Ok(build_partitions(dataset, assigned));
        }
    }
    Err(DatasetError::EmptyClient(DIRICHLET_MAX_ATTEMPTS))
}

/// Gamma-normalisation sampler. Small alphas underflow to all-zero Gamma
/// draws, in which case one coordinate chosen uniformly gets all the mass
/// (the limiting behaviour as alpha approaches zero).
fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, alpha: f64, k: usize) -> Vec<f64> {
    let gamma = rand_distr::Gamma::new(alpha, 1.0).expect("alpha > 0");
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        for d in &mut draws {
            *d /= total;
        }
    } else {
        draws.iter_mut().for_each(|d| *d = 0.0);
        draws[rng.random_range(0..k)] = 1.0;
    }
    draws
}

fn build_partitions(dataset: &Dataset, assigned: Vec<Vec<usize>>) -> Vec<ClientPartition> {
    assigned
        .into_iter()
        .enumerate()
        .map(|(client_id, idx)| ClientPartition {
            client_id,
            data: dataset.select(&idx),
        })
        .collect()
}

/// Gaussian feature noise parameters for one client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub mean: f64,
    pub std: f64,
}

impl NoiseSpec {
    pub const fn new(mean: f64, std: f64) -> Self {
        Self { mean, std }
    }
}

/// Per-client feature noise used by the four-client feature-skew scenario.
pub const FEATURE_SKEW_NOISE: [NoiseSpec; 4] = [
    NoiseSpec::new(0.0, 0.1),
    NoiseSpec::new(0.0, 0.5),
    NoiseSpec::new(1.0, 0.1),
    NoiseSpec::new(-0.1, 0.1),
];

pub const CORRUPTION_NOISE: NoiseSpec = NoiseSpec::new(1.0, 0.5);

/// Adds N(mean, std^2) to every feature of every client.
pub fn apply_feature_noise(
    mut partitions: Vec<ClientPartition>,
    noise: &[NoiseSpec],
    seed: u64,
) -> Result<Vec<ClientPartition>, DatasetError> {
    if noise.len() != partitions.len() {
        return Err(DatasetError::LengthMismatch {
            expected: partitions.len(),
            got: noise.len(),
        });
    }
    for (part, spec) in partitions.iter_mut().zip(noise) {
        add_noise(part, *spec, seed)?;
    }
    Ok(partitions)
}

fn add_noise(part: &mut ClientPartition, spec: NoiseSpec, seed: u64) -> Result<(), DatasetError> {
    if !(spec.std >= 0.0 && spec.std.is_finite() && spec.mean.is_finite()) {
        return Err(DatasetError::InvalidParam(format!(
            "noise (mean {}, std {}) must be finite with std >= 0",
            spec.mean, spec.std
        )));
    }
    if spec.std == 0.0 {
        part.data.features.iter_mut().for_each(|v| *v += spec.mean);
        return Ok(());
    }
    let mut rng = rng_for(seed, "feature_noise", &[part.client_id as u64]);
    let normal = Normal::new(spec.mean, spec.std).expect("validated above");
    for v in &mut part.data.features {
        *v += normal.sample(&mut rng);
    }
    Ok(())
}

fn client_mut(
    partitions: &mut [ClientPartition],
    client_id: usize,
) -> Result<&mut ClientPartition, DatasetError> {
    partitions
        .iter_mut()
        .find(|p| p.client_id == client_id)
        .ok_or(DatasetError::UnknownClient(client_id))
}

/// Replaces exactly `round(fraction * n)` uniformly chosen labels on one
/// client with `1 - label`.
pub fn flip_labels(
    mut partitions: Vec<ClientPartition>,
    client_id: usize,
    fraction: f64,
    seed: u64,
) -> Result<Vec<ClientPartition>, DatasetError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(DatasetError::InvalidParam(format!(
            "flip fraction {fraction} outside [0, 1]"
        )));
    }
    let part = client_mut(&mut partitions, client_id)?;
    part.data.ensure_binary()?;
    let n = part.data.len();
    let count = (fraction * n as f64).round() as usize;
    let mut rng = rng_for(seed, "flip_labels", &[client_id as u64]);
    let chosen = rand::seq::index::sample(&mut rng, n, count);
    for i in chosen {
        part.data.labels[i] = 1 - part.data.labels[i];
    }
    Ok(partitions)
}

/// Feature noise N(1, 0.5^2) plus a full label flip on one client.
pub fn corrupt_client(
    mut partitions: Vec<ClientPartition>,
    client_id: usize,
    seed: u64,
) -> Result<Vec<ClientPartition>, DatasetError> {
    {
        let part = client_mut(&mut partitions, client_id)?;
        part.data.ensure_binary()?;
        add_noise(part, CORRUPTION_NOISE, derive_seed(seed, "corrupt", &[]))?;
    }
    flip_labels(partitions, client_id, 1.0, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Iid,
    LabelSkew,
    FeatureSkew,
    NoisyLabel,
    LabelPoisoning,
    CorruptedClient,
    Dirichlet,
}

impl Scenario {
    pub const ALL: [Scenario; 7] = [
        Scenario::Iid,
        Scenario::LabelSkew,
        Scenario::FeatureSkew,
        Scenario::NoisyLabel,
        Scenario::LabelPoisoning,
        Scenario::CorruptedClient,
        Scenario::Dirichlet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Iid => "iid",
            Scenario::LabelSkew => "label_skew",
            Scenario::FeatureSkew => "feature_skew",
            Scenario::NoisyLabel => "noisy_label",
            Scenario::LabelPoisoning => "label_poisoning",
            Scenario::CorruptedClient => "corrupted_client",
            Scenario::Dirichlet => "dirichlet",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| DatasetError::InvalidParam(format!("unknown scenario `{s}`")))
    }
}

/// Full description of how a dataset is split across clients. Optional
/// fields fall back to the four-client scenario defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub scenario: Scenario,
    pub n_clients: usize,
    #[serde(default)]
    pub seed: u64,
    /// Label-skew class-1 share per client.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proportions: Option<Vec<f64>>,
    /// Label-skew samples per client.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_size: Option<usize>,
    /// Feature-skew (mean, std) per client.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<Vec<NoiseSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flip_fraction: Option<f64>,
    /// Client hit by flipping / corruption; defaults to the last client.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_client: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

impl PartitionSpec {
    pub fn new(scenario: Scenario, n_clients: usize, seed: u64) -> Self {
        Self {
            scenario,
            n_clients,
            seed,
            proportions: None,
            client_size: None,
            noise: None,
            flip_fraction: None,
            target_client: None,
            alpha: None,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.n_clients == 0 {
            return Err(DatasetError::InvalidParam("n_clients must be positive".into()));
        }
        if let Some(p) = &self.proportions {
            if p.len() != self.n_clients {
                return Err(DatasetError::LengthMismatch {
                    expected: self.n_clients,
                    got: p.len(),
                });
            }
            if let Some(v) = p.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
                return Err(DatasetError::InvalidParam(format!(
                    "proportion {v} outside (0, 1)"
                )));
            }
        }
        if let Some(a) = self.alpha {
            if a.is_nan() || a <= 0.0 {
                return Err(DatasetError::InvalidParam(format!("alpha {a} must be > 0")));
            }
        }
        if let Some(f) = self.flip_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(DatasetError::InvalidParam(format!(
                    "flip fraction {f} outside [0, 1]"
                )));
            }
        }
        if let Some(t) = self.target_client {
            if t >= self.n_clients {
                return Err(DatasetError::UnknownClient(t));
            }
        }
        Ok(())
    }

    pub fn target(&self) -> usize {
        self.target_client.unwrap_or(self.n_clients - 1)
    }

    pub fn apply(&self, dataset: &Dataset) -> Result<Vec<ClientPartition>, DatasetError> {
        self.validate()?;
        let seed = self.seed;
        let split = |tag: &str| partition_iid(dataset, self.n_clients, derive_seed(seed, tag, &[]));
        match self.scenario {
            Scenario::Iid => split("iid"),
            Scenario::LabelSkew => {
                let proportions = match &self.proportions {
                    Some(p) => p.clone(),
                    None => default_skew_proportions(self.n_clients),
                };
                let client_size = self
                    .client_size
                    .unwrap_or(dataset.len() / (2 * self.n_clients).max(1));
                partition_label_skew(dataset, &proportions, client_size, seed)
            }
            Scenario::FeatureSkew => {
                let noise = match &self.noise {
                    Some(n) => n.clone(),
                    None if self.n_clients == FEATURE_SKEW_NOISE.len() => FEATURE_SKEW_NOISE.to_vec(),
                    None => {
                        return Err(DatasetError::InvalidParam(
                            "feature_skew needs explicit noise for this client count".into(),
                        ))
                    }
                };
                apply_feature_noise(split("feature_skew")?, &noise, seed)
            }
            Scenario::NoisyLabel => flip_labels(
                split("noisy_label")?,
                self.target(),
                self.flip_fraction.unwrap_or(0.3),
                seed,
            ),
            Scenario::LabelPoisoning => flip_labels(
                split("label_poisoning")?,
                self.target(),
                self.flip_fraction.unwrap_or(1.0),
                seed,
            ),
            Scenario::CorruptedClient => {
                corrupt_client(split("corrupted_client")?, self.target(), seed)
            }
            Scenario::Dirichlet => {
                partition_dirichlet(dataset, self.n_clients, self.alpha.unwrap_or(0.5), seed)
            }
        }
    }
}

/// 0.9, 0.7, 0.5, 0.1 for four clients; evenly spaced in [0.1, 0.9] otherwise.
pub fn default_skew_proportions(n_clients: usize) -> Vec<f64> {
    if n_clients == 4 {
        return vec![0.9, 0.7, 0.5, 0.1];
    }
    if n_clients == 1 {
        return vec![0.5];
    }
    (0..n_clients)
        .map(|i| 0.9 - 0.8 * i as f64 / (n_clients - 1) as f64)
        .collect()
}
