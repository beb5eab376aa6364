//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use fedsel_core::dataset::{ClientPartition, Dataset};
use fedsel_core::model::{ClientUpdate, ModelParams};
use fedsel_core::search::{genetic_search, EvalOutcome, GeneticOptions, SearchHooks};
use fedsel_core::strategies::{default_schema, StrategyConfig, StrategyName};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const COORDS: usize = 8;

pub fn params(values: &[f64]) -> ModelParams {
    ModelParams::from_layers(&[3, 2], vec![values.to_vec()]).unwrap()
}

pub fn updates(rows: &[Vec<f64>]) -> Vec<ClientUpdate> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| ClientUpdate {
            client_id: i,
            params: params(r),
            num_examples: 10,
            train_loss: 0.0,
        })
        .collect()
}

pub fn random_rows(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..COORDS).map(|_| rng.random_range(-10.0..10.0)).collect())
        .collect()
}

pub fn column(rows: &[Vec<f64>], c: usize) -> Vec<f64> {
    rows.iter().map(|r| r[c]).collect()
}

/// Ascending order by repeatedly taking the smallest remaining value.
pub fn selection_sort(mut v: Vec<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len());
    while !v.is_empty() {
        let (i, _) = v
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, x)| if *x < acc.1 { (i, *x) } else { acc });
        out.push(v.remove(i));
    }
    out
}

pub fn clamped_mean(sorted: &[f64]) -> f64 {
    let s: f64 = sorted.iter().sum();
    (s / sorted.len() as f64).clamp(sorted[0], sorted[sorted.len() - 1])
}

pub fn median_oracle(rows: &[Vec<f64>]) -> Vec<f64> {
    (0..COORDS)
        .map(|c| {
            let s = selection_sort(column(rows, c));
            let n = s.len();
            if n % 2 == 1 {
                s[n / 2]
            } else {
                (s[n / 2 - 1] + s[n / 2]) / 2.0
            }
        })
        .collect()
}

pub fn trimmed_oracle(rows: &[Vec<f64>], beta: f64) -> Vec<f64> {
    let k = (beta * rows.len() as f64).floor() as usize;
    (0..COORDS)
        .map(|c| {
            let s = selection_sort(column(rows, c));
            clamped_mean(&s[k..s.len() - k])
        })
        .collect()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (0..n).filter(|i| m & (1 << i) != 0).collect())
        .collect()
}

/// Krum by enumeration: each score is the smallest neighbour-set sum over
/// every subset of the right size; the kept set is the m-subset whose
/// largest (score, index) pair is smallest.
pub fn krum_oracle(rows: &[Vec<f64>], f: usize, m: usize) -> Vec<f64> {
    let n = rows.len();
    let k = n - f - 2;
    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            subsets(others.len(), k)
                .into_iter()
                .map(|s| {
                    let d = selection_sort(s.iter().map(|&t| sq_dist(&rows[i], &rows[others[t]])).collect());
                    d.iter().sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let kept = subsets(n, m)
        .into_iter()
        .min_by(|a, b| {
            let worst = |s: &Vec<usize>| {
                s.iter()
                    .map(|&i| (scores[i], i))
                    .max_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)))
                    .unwrap()
            };
            let (wa, wb) = (worst(a), worst(b));
            wa.0.total_cmp(&wb.0).then(wa.1.cmp(&wb.1))
        })
        .unwrap();
    (0..COORDS)
        .map(|c| {
            let vals: Vec<f64> = kept.iter().map(|&i| rows[i][c]).collect();
            let s: f64 = vals.iter().sum();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (s / vals.len() as f64).clamp(lo, hi)
        })
        .collect()
}

pub fn random_partitions(rng: &mut ChaCha8Rng, d: usize) -> Vec<ClientPartition> {
    let clients = rng.random_range(2..6);
    (0..clients)
        .map(|id| {
            let n = rng.random_range(5..60);
            let shift: f64 = rng.random_range(-2.0..2.0);
            let features: Vec<f64> = (0..n * d)
                .map(|i| shift * (i % d) as f64 / d as f64 + rng.random_range(-1.0..1.0) * (1 + i % 3) as f64)
                .collect();
            let labels = (0..n).map(|i| i % 2).collect();
            ClientPartition {
                client_id: id,
                data: Dataset::new(features, d, labels, 2).unwrap(),
            }
        })
        .collect()
}

/// Pooled rows standardised with the population std, then the n-1 sample
/// covariance, all computed directly.
pub fn centralised_covariance(parts: &[ClientPartition], d: usize) -> DMatrix<f64> {
    let rows: Vec<&[f64]> = parts.iter().flat_map(|p| p.data.rows()).collect();
    let n = rows.len();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mut z = x.clone();
    for j in 0..d {
        let col = x.column(j);
        let mean = col.mean();
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        for i in 0..n {
            z[(i, j)] = (x[(i, j)] - mean) / std;
        }
    }
    for j in 0..d {
        let m = z.column(j).mean();
        z.column_mut(j).add_scalar_mut(-m);
    }
    z.transpose() * &z / (n - 1) as f64
}

/// Each D(i, j) from scratch, summed over `j != i` in index order.
pub fn mean_identity_oracle(params: &[ModelParams]) -> Vec<f64> {
    let n = params.len();
    (0..n)
        .map(|i| {
            let mut total = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                let mut d = 0.0;
                for (a, b) in params[i].layers().iter().zip(params[j].layers()) {
                    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
                    d += sq.sqrt();
                }
                total += d;
            }
            total / (n - 1) as f64
        })
        .collect()
}

pub fn landscape(c: &StrategyConfig) -> EvalOutcome {
    match (c.name(), c.get("proximal_mu")) {
        (StrategyName::FedProx, Some(mu)) => (1.0 - (mu.as_f64() - 0.5).abs()).into(),
        _ => 0.0.into(),
    }
}

/// Seeds whose first generation holds a fed_prox elite with mu in [0.35, 0.65].
pub fn seeded_landscape_seeds(count: usize) -> Vec<u64> {
    let schema = default_schema();
    (0u64..)
        .filter(|&seed| {
            let first = GeneticOptions { generations: 1, seed, ..GeneticOptions::default() };
            let out = genetic_search(&schema, 4, landscape, &first, SearchHooks::default()).unwrap();
            out.archive.records().iter().any(|r| {
                r.config.name() == StrategyName::FedProx
                    && (0.35..=0.65).contains(&r.config.get("proximal_mu").unwrap().as_f64())
            })
        })
        .take(count)
        .collect()
}

