//! Heterogeneity diagnostics: label skew via Jensen-Shannon divergence,
//! feature skew via two-round federated PCA, and outlier clients via
//! repeated round-2 weight divergence.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ClientPartition;
use crate::engine::{initial_params, train_round};
use crate::model::{ModelError, ModelParams, TrainSettings};
use crate::rng::derive_seed;
use crate::strategies::{aggregate, StrategyConfig};

pub const LABEL_SKEW_THRESHOLD: f64 = 0.1;
pub const FEATURE_SKEW_THRESHOLD: f64 = 1.0;
pub const OUTLIER_REPETITIONS: usize = 5;
pub const OUTLIER_REP_THRESHOLD: usize = 4;
pub const OUTLIER_PERCENTILE: f64 = 90.0;

const STD_FLOOR: f64 = 1e-12;

/// Local SGD used by the outlier probe rounds. Per-sample steps make the
/// repetitions differ enough for flag frequency to carry information.
pub const PROBE_TRAIN: TrainSettings = TrainSettings {
    local_epochs: 1,
    learning_rate: 0.1,
    batch_size: 1,
    proximal_mu: 0.0,
};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("need at least {needed} clients, got {got}")]
    TooFewClients { needed: usize, got: usize },
    #[error("client {0} has no samples")]
    EmptyPartition(usize),
    #[error("feature skew needs at least 2 features, got {0}")]
    TooFewFeatures(usize),
    #[error("clients disagree on feature width")]
    FeatureMismatch,
    #[error("parameter shapes differ between clients")]
    ShapeMismatch,
    #[error("probe training failed on client {client}: {source}")]
    Training { client: usize, source: ModelError },
    #[error("probe aggregation failed: {0}")]
    Aggregation(String),
}

fn require_clients(partitions: &[ClientPartition], needed: usize) -> Result<(), DetectError> {
    if partitions.len() < needed {
        return Err(DetectError::TooFewClients {
            needed,
            got: partitions.len(),
        });
    }
    if let Some(p) = partitions.iter().find(|p| p.data.is_empty()) {
        return Err(DetectError::EmptyPartition(p.client_id));
    }
    Ok(())
}

/// A probability vector over the globally aligned label set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution(Vec<f64>);

impl LabelDistribution {
    /// Normalises non-negative weights; `None` if they sum to zero.
    pub fn from_weights(weights: &[f64]) -> Option<Self> {
        let total: f64 = weights.iter().sum();
        if total.is_nan() || total <= 0.0 || weights.iter().any(|w| *w < 0.0) {
            return None;
        }
        Some(Self(weights.iter().map(|w| w / total).collect()))
    }

    pub fn from_counts(counts: &[usize]) -> Option<Self> {
        let w: Vec<f64> = counts.iter().map(|c| *c as f64).collect();
        Self::from_weights(&w)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    /// Zero-fills up to `len` labels.
    pub fn aligned(&self, len: usize) -> Self {
        let mut p = self.0.clone();
        p.resize(len.max(p.len()), 0.0);
        Self(p)
    }
}

fn kl_base2(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, mi)| pi * (pi / mi).log2())
        .sum()
}

/// Jensen-Shannon divergence with base-2 logs, so the value lies in [0, 1].
/// Shorter inputs are zero-filled to the longer length.
pub fn jsd(p: &LabelDistribution, q: &LabelDistribution) -> f64 {
    let len = p.0.len().max(q.0.len());
    let (p, q) = (p.aligned(len), q.aligned(len));
    let m: Vec<f64> = p.0.iter().zip(&q.0).map(|(a, b)| 0.5 * (a + b)).collect();
    let v = 0.5 * kl_base2(&p.0, &m) + 0.5 * kl_base2(&q.0, &m);
    v.clamp(0.0, 1.0)
}

/// Shannon entropy in bits.
pub fn entropy(p: &LabelDistribution) -> f64 {
    -p.0.iter().filter(|v| **v > 0.0).map(|v| v * v.log2()).sum::<f64>()
}

pub fn client_label_distributions(
    partitions: &[ClientPartition],
) -> Result<Vec<LabelDistribution>, DetectError> {
    let width = partitions
        .iter()
        .map(|p| p.data.n_classes())
        .max()
        .unwrap_or(0);
    partitions
        .iter()
        .map(|p| {
            LabelDistribution::from_counts(&p.data.class_counts())
                .map(|d| d.aligned(width))
                .ok_or(DetectError::EmptyPartition(p.client_id))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSkewResult {
    pub flag: bool,
    pub max_jsd: f64,
    pub per_client: Vec<f64>,
    pub global: LabelDistribution,
}

/// Compares each client's label distribution with the unweighted mean of
/// all client distributions.
pub fn detect_label_skew(
    partitions: &[ClientPartition],
    threshold: f64,
) -> Result<LabelSkewResult, DetectError> {
    require_clients(partitions, 2)?;
    let dists = client_label_distributions(partitions)?;
    let width = dists[0].0.len();
    let mut global = vec![0.0; width];
    for d in &dists {
        for (g, v) in global.iter_mut().zip(&d.0) {
            *g += v / dists.len() as f64;
        }
    }
    let global = LabelDistribution(global);
    let per_client: Vec<f64> = dists.iter().map(|d| jsd(d, &global)).collect();
    let max_jsd = per_client.iter().copied().fold(0.0, f64::max);
    Ok(LabelSkewResult {
        flag: max_jsd > threshold,
        max_jsd,
        per_client,
        global,
    })
}

/// Max minus min client label entropy. Diagnostic only; it does not feed
/// the heterogeneity report.
pub fn entropy_spread(partitions: &[ClientPartition]) -> Result<f64, DetectError> {
    require_clients(partitions, 2)?;
    let h: Vec<f64> = client_label_distributions(partitions)?
        .iter()
        .map(entropy)
        .collect();
    let max = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = h.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}

/// Sufficient statistics one client shares for the global covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentStats {
    pub n: usize,
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
    /// Packed upper triangle including the diagonal: entry `(j, k)` with
    /// `j <= k` holds the sum of `x_j * x_k`.
    pub cross: Vec<f64>,
}

pub fn packed_index(d: usize, j: usize, k: usize) -> usize {
    let (j, k) = if j <= k { (j, k) } else { (k, j) };
    j * d - j * (j + 1) / 2 + k
}

impl MomentStats {
    pub fn zeros(d: usize) -> Self {
        Self {
            n: 0,
            sum: vec![0.0; d],
            sum_sq: vec![0.0; d],
            cross: vec![0.0; d * (d + 1) / 2],
        }
    }

    pub fn dim(&self) -> usize {
        self.sum.len()
    }

    pub fn from_rows<'a>(d: usize, rows: impl IntoIterator<Item = &'a [f64]>) -> Self {
        Self::from_rows_mapped(d, rows, |_, v| v)
    }

    /// Moments of `f(j, x_j)` over the rows.
    fn from_rows_mapped<'a>(
        d: usize,
        rows: impl IntoIterator<Item = &'a [f64]>,
        f: impl Fn(usize, f64) -> f64,
    ) -> Self {
        let mut s = Self::zeros(d);
        let mut x = vec![0.0; d];
        for row in rows {
            for (j, v) in row.iter().enumerate() {
                x[j] = f(j, *v);
            }
            s.n += 1;
            let mut idx = 0;
            for j in 0..d {
                s.sum[j] += x[j];
                s.sum_sq[j] += x[j] * x[j];
                for k in j..d {
                    s.cross[idx] += x[j] * x[k];
                    idx += 1;
                }
            }
        }
        s
    }

    pub fn merge(&mut self, other: &MomentStats) {
        self.n += other.n;
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *a += b;
        }
        for (a, b) in self.cross.iter_mut().zip(&other.cross) {
            *a += b;
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.n as f64).collect()
    }

    /// Population standard deviation per feature, floored at 1e-12.
    pub fn std(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, q)| {
                let m = s / n;
                (q / n - m * m).max(0.0).sqrt().max(STD_FLOOR)
            })
            .collect()
    }

    /// Sample covariance (divisor `n - 1`, or `n` for a single row),
    /// returned as a dense row-major `d x d` matrix.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim();
        let n = self.n as f64;
        let denom = if self.n > 1 { n - 1.0 } else { 1.0 };
        let mean = self.mean();
        let mut cov = vec![0.0; d * d];
        for j in 0..d {
            for k in j..d {
                let c = (self.cross[packed_index(d, j, k)] - n * mean[j] * mean[k]) / denom;
                cov[j * d + k] = c;
                cov[k * d + j] = c;
            }
        }
        cov
    }
}

/// Server state after the first federated PCA round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    /// Raw-feature global mean and std used for standardisation.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Covariance of the standardised pooled data, row-major.
    pub covariance: Vec<f64>,
    /// Top two unit eigenvectors, largest eigenvalue first.
    pub components: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
}

fn check_features(partitions: &[ClientPartition]) -> Result<usize, DetectError> {
    let d = partitions[0].data.n_features();
    if partitions.iter().any(|p| p.data.n_features() != d) {
        return Err(DetectError::FeatureMismatch);
    }
    if d < 2 {
        return Err(DetectError::TooFewFeatures(d));
    }
    Ok(d)
}

/// First PCA round. Clients report raw moments, the server derives global
/// mean and std, clients report moments of their standardised features,
/// and the server assembles the covariance and extracts two components.
pub fn fed_pca_round1(partitions: &[ClientPartition]) -> Result<PcaBasis, DetectError> {
    require_clients(partitions, 1)?;
    let d = check_features(partitions)?;
    let mut raw = MomentStats::zeros(d);
    for p in partitions {
        raw.merge(&MomentStats::from_rows(d, p.data.rows()));
    }
    let mean = raw.mean();
    let std = raw.std();
    let mut standardised = MomentStats::zeros(d);
    for p in partitions {
        let local = MomentStats::from_rows_mapped(d, p.data.rows(), |j, v| (v - mean[j]) / std[j]);
        standardised.merge(&local);
    }
    let covariance = standardised.covariance();
    let (values, vectors) = symmetric_eigen(&covariance, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let component = |i: usize| {
        let col = order[i];
        let mut v: Vec<f64> = (0..d).map(|r| vectors[r * d + col]).collect();
        fix_sign(&mut v);
        v
    };
    Ok(PcaBasis {
        mean,
        std,
        covariance,
        components: [component(0), component(1)],
        eigenvalues: [values[order[0]], values[order[1]]],
    })
}

/// Flips `v` so that its largest-magnitude entry is positive. Entries within
/// a relative 1e-9 of the largest count as tied and the first of them wins.
pub fn fix_sign(v: &mut [f64]) {
    let top = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let Some(lead) = v.iter().find(|x| x.abs() >= top * (1.0 - 1e-9)) else {
        return;
    };
    if *lead < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric row-major `d x d`
/// matrix. Returns eigenvalues and a row-major matrix whose columns are the
/// matching unit eigenvectors.
pub fn symmetric_eigen(matrix: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j] * a[i * d + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values = (0..d).map(|i| a[i * d + i]).collect();
    (values, v)
}

/// Second PCA round: each client standardises with the broadcast mean and
/// std, projects onto the two components, and returns its mean projection.
pub fn fed_pca_round2(
    partitions: &[ClientPartition],
    basis: &PcaBasis,
) -> Result<Vec<[f64; 2]>, DetectError> {
    partitions
        .iter()
        .map(|p| {
            if p.data.is_empty() {
                return Err(DetectError::EmptyPartition(p.client_id));
            }
            if p.data.n_features() != basis.mean.len() {
                return Err(DetectError::FeatureMismatch);
            }
            let mut centroid = [0.0; 2];
            for row in p.data.rows() {
                for (c, comp) in centroid.iter_mut().zip(&basis.components) {
                    *c += row
                        .iter()
                        .enumerate()
                        .map(|(j, x)| (x - basis.mean[j]) / basis.std[j] * comp[j])
                        .sum::<f64>();
                }
            }
            let n = p.data.len() as f64;
            Ok([centroid[0] / n, centroid[1] / n])
        })
        .collect()
}

pub fn centroid_distances(centroids: &[[f64; 2]]) -> Vec<Vec<f64>> {
    centroids
        .iter()
        .map(|a| {
            centroids
                .iter()
                .map(|b| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSkewResult {
    pub flag: bool,
    pub max_distance: f64,
    pub distances: Vec<Vec<f64>>,
    pub centroids: Vec<[f64; 2]>,
}

pub fn detect_feature_skew(
    partitions: &[ClientPartition],
    threshold: f64,
) -> Result<FeatureSkewResult, DetectError> {
    require_clients(partitions, 2)?;
    let basis = fed_pca_round1(partitions)?;
    let centroids = fed_pca_round2(partitions, &basis)?;
    let distances = centroid_distances(&centroids);
    let max_distance = distances.iter().flatten().copied().fold(0.0, f64::max);
    Ok(FeatureSkewResult {
        flag: max_distance > threshold,
        max_distance,
        distances,
        centroids,
    })
}

/// Sum over layers of the unsquared L2 norm of the layer difference.
pub fn pairwise_divergence(a: &ModelParams, b: &ModelParams) -> f64 {
    a.layers()
        .iter()
        .zip(b.layers())
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(u, v)| (u - v) * (u - v))
                .sum::<f64>()
                .sqrt()
        })
        .sum()
}

/// Mean pairwise divergence of each client to every other client.
pub fn divergence_scores(params: &[&ModelParams]) -> Result<Vec<f64>, DetectError> {
    let n = params.len();
    if n < 3 {
        return Err(DetectError::TooFewClients { needed: 3, got: n });
    }
    if params.iter().any(|p| !p.same_shape(params[0])) {
        return Err(DetectError::ShapeMismatch);
    }
    let mut total = vec![0.0; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = pairwise_divergence(params[i], params[j]);
            total[i] += d;
            total[j] += d;
        }
    }
    Ok(total.into_iter().map(|t| t / (n - 1) as f64).collect())
}

/// Nearest-rank percentile: the value at rank `ceil(p/100 * n)` of the
/// ascending sort.
pub fn nearest_rank_percentile(values: &[f64], percentile: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((percentile / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierOptions {
    pub repetitions: usize,
    pub rep_threshold: usize,
    pub percentile: f64,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for OutlierOptions {
    fn default() -> Self {
        Self {
            repetitions: OUTLIER_REPETITIONS,
            rep_threshold: OUTLIER_REP_THRESHOLD,
            percentile: OUTLIER_PERCENTILE,
            seed: 0,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierResult {
    pub flag: bool,
    /// Per client (in client-id order): repetitions in which it was flagged.
    pub flag_counts: Vec<usize>,
    /// Per repetition: divergence score of each client.
    pub scores: Vec<Vec<f64>>,
}

/// Two FedAvg rounds from a fresh initialisation; returns the round-2
/// client models before they are aggregated.
pub fn round_two_updates(
    partitions: &[ClientPartition],
    architecture: &[usize],
    settings: &TrainSettings,
    seed: u64,
) -> Result<Vec<ModelParams>, DetectError> {
    let settings = TrainSettings {
        proximal_mu: 0.0,
        ..*settings
    };
    let training = |(client, source)| DetectError::Training { client, source };
    let mut global = initial_params(architecture, seed).map_err(|e| DetectError::Training {
        client: 0,
        source: e,
    })?;
    let first = train_round(&global, partitions, &settings, seed, 1, false).map_err(training)?;
    global = aggregate(&StrategyConfig::fed_avg(), &first, &global)
        .map_err(|e| DetectError::Aggregation(e.to_string()))?;
    let second = train_round(&global, partitions, &settings, seed, 2, false).map_err(training)?;
    Ok(second.into_iter().map(|u| u.params).collect())
}

/// Flags clients whose round-2 divergence reaches the repetition's
/// percentile in at least `rep_threshold` of `repetitions` independent runs.
pub fn detect_outliers(
    partitions: &[ClientPartition],
    architecture: &[usize],
    settings: &TrainSettings,
    options: &OutlierOptions,
) -> Result<OutlierResult, DetectError> {
    use rayon::prelude::*;
    require_clients(partitions, 3)?;
    let rep = |r: usize| -> Result<Vec<f64>, DetectError> {
        let seed = derive_seed(options.seed, "outlier_repetition", &[r as u64]);
        let params = round_two_updates(partitions, architecture, settings, seed)?;
        let refs: Vec<&ModelParams> = params.iter().collect();
        divergence_scores(&refs)
    };
    let scores: Vec<Vec<f64>> = if options.parallel {
        (0..options.repetitions).into_par_iter().map(rep).collect::<Result<_, _>>()?
    } else {
        (0..options.repetitions).map(rep).collect::<Result<_, _>>()?
    };
    let mut flag_counts = vec![0usize; partitions.len()];
    for s in &scores {
        let cut = nearest_rank_percentile(s, options.percentile);
        for (count, v) in flag_counts.iter_mut().zip(s) {
            if *v >= cut {
                *count += 1;
            }
        }
    }
    Ok(OutlierResult {
        flag: flag_counts.iter().any(|c| *c >= options.rep_threshold),
        flag_counts,
        scores,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub label_jsd: f64,
    pub feature_distance: f64,
    pub repetitions: usize,
    pub rep_threshold: usize,
    pub percentile: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            label_jsd: LABEL_SKEW_THRESHOLD,
            feature_distance: FEATURE_SKEW_THRESHOLD,
            repetitions: OUTLIER_REPETITIONS,
            rep_threshold: OUTLIER_REP_THRESHOLD,
            percentile: OUTLIER_PERCENTILE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityReport {
    pub n_clients: usize,
    pub label_skew: bool,
    pub max_jsd: f64,
    pub per_client_jsd: Vec<f64>,
    pub feature_skew: bool,
    pub max_centroid_distance: f64,
    pub centroid_distances: Vec<Vec<f64>>,
    pub outlier_risk: bool,
    pub flag_counts: Vec<usize>,
    /// Diagnostic only; not used for any flag.
    pub entropy_spread: f64,
    pub thresholds: Thresholds,
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "Yes"
    } else {
        "No"
    }
}

impl HeterogeneityReport {
    /// Minimal report carrying only the three flags.
    pub fn from_flags(n_clients: usize, label_skew: bool, feature_skew: bool, outlier_risk: bool) -> Self {
        Self {
            n_clients,
            label_skew,
            max_jsd: 0.0,
            per_client_jsd: Vec::new(),
            feature_skew,
            max_centroid_distance: 0.0,
            centroid_distances: Vec::new(),
            outlier_risk,
            flag_counts: Vec::new(),
            entropy_spread: 0.0,
            thresholds: Thresholds::default(),
        }
    }

    /// The three `Name: Yes/No` lines.
    pub fn flag_lines(&self) -> String {
        format!(
            "Label Skew: {}\nFeature Skew: {}\nOutlier Risk: {}",
            yes_no(self.label_skew),
            yes_no(self.feature_skew),
            yes_no(self.outlier_risk)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectOptions {
    pub thresholds: Thresholds,
    pub train: TrainSettings,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self {
            thresholds: Thresholds::default(),
            train: PROBE_TRAIN,
            seed: 0,
            parallel: true,
        }
    }
}

pub fn build_report(
    partitions: &[ClientPartition],
    architecture: &[usize],
    options: &DetectOptions,
) -> Result<HeterogeneityReport, DetectError> {
    let t = options.thresholds;
    let label = detect_label_skew(partitions, t.label_jsd)?;
    let feature = detect_feature_skew(partitions, t.feature_distance)?;
    let outliers = detect_outliers(
        partitions,
        architecture,
        &options.train,
        &OutlierOptions {
            repetitions: t.repetitions,
            rep_threshold: t.rep_threshold,
            percentile: t.percentile,
            seed: options.seed,
            parallel: options.parallel,
        },
    )?;
    Ok(HeterogeneityReport {
        n_clients: partitions.len(),
        label_skew: label.flag,
        max_jsd: label.max_jsd,
        per_client_jsd: label.per_client,
        feature_skew: feature.flag,
        max_centroid_distance: feature.max_distance,
        centroid_distances: feature.distances,
        outlier_risk: outliers.flag,
        flag_counts: outliers.flag_counts,
        entropy_spread: entropy_spread(partitions)?,
        thresholds: t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dataset;

    fn dist(v: &[f64]) -> LabelDistribution {
        LabelDistribution::from_weights(v).unwrap()
    }

    fn client(id: usize, labels: Vec<usize>, n_classes: usize) -> ClientPartition {
        let n = labels.len();
        ClientPartition {
            client_id: id,
            data: Dataset::new(vec![0.0; n], 1, labels, n_classes).unwrap(),
        }
    }

    #[test]
    fn jsd_examples() {
        assert_eq!(jsd(&dist(&[0.5, 0.5]), &dist(&[0.5, 0.5])), 0.0);
        assert_eq!(jsd(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0])), 1.0);
    }

    #[test]
    fn jsd_zero_fills_missing_labels() {
        let a = jsd(&dist(&[0.3, 0.7]), &dist(&[0.6, 0.4]));
        let b = jsd(&dist(&[0.3, 0.7, 0.0]), &dist(&[0.6, 0.4]));
        assert_eq!(a, b);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&dist(&[0.5, 0.5])), 1.0);
        assert_eq!(entropy(&dist(&[1.0, 0.0])), 0.0);
        let parts = vec![client(0, vec![0, 1], 2), client(1, vec![1, 1], 2)];
        assert_eq!(entropy_spread(&parts).unwrap(), 1.0);
        let same = vec![client(0, vec![0, 1], 2), client(1, vec![1, 0], 2)];
        assert_eq!(entropy_spread(&same).unwrap(), 0.0);
    }

    #[test]
    fn label_skew_identical_clients() {
        let parts = vec![client(0, vec![0, 1, 1], 2), client(1, vec![1, 0, 1], 2)];
        let r = detect_label_skew(&parts, 0.1).unwrap();
        assert_eq!(r.max_jsd, 0.0);
        assert!(!r.flag);
    }

    #[test]
    fn label_skew_needs_two_clients() {
        let parts = vec![client(0, vec![0, 1], 2)];
        assert!(matches!(
            detect_label_skew(&parts, 0.1),
            Err(DetectError::TooFewClients { .. })
        ));
        let parts = vec![client(0, vec![0, 1], 2), client(1, vec![], 2)];
        assert!(matches!(
            detect_label_skew(&parts, 0.1),
            Err(DetectError::EmptyPartition(1))
        ));
    }

    #[test]
    fn packed_index_walks_upper_triangle() {
        let d = 4;
        let mut expected = 0;
        for j in 0..d {
            for k in j..d {
                assert_eq!(packed_index(d, j, k), expected);
                assert_eq!(packed_index(d, k, j), expected);
                expected += 1;
            }
        }
    }

    #[test]
    fn eigen_of_diagonal() {
        let (vals, vecs) = symmetric_eigen(&[2.0, 0.0, 0.0, 1.0], 2);
        assert_eq!(vals, vec![2.0, 1.0]);
        assert_eq!(vecs, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn pca_components_of_axis_aligned_data() {
        // variance 2 along x, 1 along y (before standardisation they differ;
        // check the raw covariance instead)
        let rows = [[2.0, 0.0], [-2.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let s = MomentStats::from_rows(2, flat.chunks(2));
        let cov = s.covariance();
        let (vals, vecs) = symmetric_eigen(&cov, 2);
        assert!(vals[0] > vals[1]);
        assert_eq!(vecs[0].abs(), 1.0);
        assert_eq!(vecs[3].abs(), 1.0);
    }

    #[test]
    fn fix_sign_makes_largest_positive() {
        let mut v = vec![0.1, -0.9, 0.3];
        fix_sign(&mut v);
        assert_eq!(v, vec![-0.1, 0.9, -0.3]);
    }

    #[test]
    fn centroid_distance_example() {
        let d = centroid_distances(&[[0.0, 0.0], [3.0, 4.0]]);
        assert_eq!(d[0][1], 5.0);
        assert_eq!(d[1][0], 5.0);
        assert_eq!(d[0][0], 0.0);
    }

    fn layer_params(values: &[Vec<f64>]) -> ModelParams {
        // [1, 2] layer holds 4 values; callers pad to fit
        let layers = values.to_vec();
        let sizes: Vec<usize> = match layers.len() {
            1 => vec![1, 2],
            _ => vec![1, 2, 2],
        };
        ModelParams::from_layers(&sizes, layers).unwrap()
    }

    #[test]
    fn divergence_examples() {
        let ps: Vec<ModelParams> = [0.0, 0.0, 3.0]
            .iter()
            .map(|v| layer_params(&[vec![*v, 0.0, 0.0, 0.0]]))
            .collect();
        let refs: Vec<&ModelParams> = ps.iter().collect();
        assert_eq!(divergence_scores(&refs).unwrap(), vec![1.5, 1.5, 3.0]);

        let same: Vec<&ModelParams> = vec![&ps[0], &ps[0], &ps[0]];
        assert_eq!(divergence_scores(&same).unwrap(), vec![0.0; 3]);

        let a = layer_params(&[vec![0.0; 4], vec![0.0; 6]]);
        let b = layer_params(&[vec![3.0, 0.0, 0.0, 0.0], vec![4.0, 0.0, 0.0, 0.0, 0.0, 0.0]]);
        assert_eq!(pairwise_divergence(&a, &b), 7.0);
    }

    #[test]
    fn divergence_needs_three_matching_clients() {
        let a = layer_params(&[vec![0.0; 4]]);
        assert!(divergence_scores(&[&a, &a]).is_err());
        let b = layer_params(&[vec![0.0; 4], vec![0.0; 6]]);
        assert!(matches!(
            divergence_scores(&[&a, &a, &b]),
            Err(DetectError::ShapeMismatch)
        ));
    }

    #[test]
    fn percentile_nearest_rank() {
        let v = [3.0, 1.0, 4.0, 2.0];
        assert_eq!(nearest_rank_percentile(&v, 90.0), 4.0);
        assert_eq!(nearest_rank_percentile(&v, 50.0), 2.0);
        let ten: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(nearest_rank_percentile(&ten, 90.0), 9.0);
        assert_eq!(nearest_rank_percentile(&[5.0, 1.0, 2.0], 90.0), 5.0);
    }

    #[test]
    fn format_b_lines() {
        let r = HeterogeneityReport::from_flags(4, true, false, true);
        assert_eq!(r.flag_lines(), "Label Skew: Yes\nFeature Skew: No\nOutlier Risk: Yes");
    }
}
