//! Synchronous federated rounds over in-process simulated clients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ClientPartition;
use crate::model::{self, ClientUpdate, ModelError, ModelParams, TrainSettings};
use crate::rng::derive_seed;
use crate::strategies::{aggregate, StrategyConfig};

/// Rounds per run unless configured otherwise.
pub const DEFAULT_ROUNDS: usize = 30;

/// Width of the trailing window averaged by [`fitness`].
pub const FITNESS_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub strategy: StrategyConfig,
    pub rounds: usize,
    pub train: TrainSettings,
    /// Full layer sizes, input width first and class count last.
    pub architecture: Vec<usize>,
    pub seed: u64,
    /// Train clients on the rayon pool. Results are identical either way.
    pub parallel: bool,
}

impl RunConfig {
    pub fn new(strategy: StrategyConfig, architecture: Vec<usize>, seed: u64) -> Self {
        Self {
            strategy,
            rounds: DEFAULT_ROUNDS,
            train: TrainSettings::default(),
            architecture,
            seed,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub weighted_accuracy: f64,
    pub client_accuracies: Vec<f64>,
    pub client_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub rounds: Vec<RoundMetrics>,
    pub status: RunStatus,
    pub failure_reason: Option<String>,
    #[serde(skip)]
    pub final_params: Option<ModelParams>,
}

impl RunResult {
    pub fn weighted_accuracies(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.weighted_accuracy).collect()
    }

    /// `round,weighted_accuracy,client_0_acc,...` with one row per round.
    pub fn metrics_csv(&self) -> String {
        let n_clients = self.rounds.first().map_or(0, |r| r.client_accuracies.len());
        let mut out = String::from("round,weighted_accuracy");
        for i in 0..n_clients {
            out.push_str(&format!(",client_{i}_acc"));
        }
        out.push('\n');
        for r in &self.rounds {
            out.push_str(&format!("{},{}", r.round, r.weighted_accuracy));
            for a in &r.client_accuracies {
                out.push_str(&format!(",{a}"));
            }
            out.push('\n');
        }
        out
    }

    fn failed(rounds: Vec<RoundMetrics>, reason: String) -> Self {
        Self {
            rounds,
            status: RunStatus::Failed,
            failure_reason: Some(reason),
            final_params: None,
        }
    }
}

/// `sum(n_i * acc_i) / sum(n_i)`.
pub fn weighted_accuracy(accuracies: &[f64], sizes: &[usize]) -> f64 {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let acc: f64 = accuracies
        .iter()
        .zip(sizes)
        .map(|(a, n)| a * *n as f64)
        .sum();
    acc / total as f64
}

/// Seed for one client's local training in one round.
pub fn client_seed(run_seed: u64, round: usize, client_id: usize) -> u64 {
    derive_seed(run_seed, "client_train", &[round as u64, client_id as u64])
}

pub fn initial_params(architecture: &[usize], run_seed: u64) -> Result<ModelParams, ModelError> {
    model::init_model(architecture, derive_seed(run_seed, "global_init", &[]))
}

/// Local training on every client from the same global model. Updates come
/// back in client-id order. The first failing client (lowest id) is reported.
pub fn train_round(
    global: &ModelParams,
    partitions: &[ClientPartition],
    settings: &TrainSettings,
    run_seed: u64,
    round: usize,
    parallel: bool,
) -> Result<Vec<ClientUpdate>, (usize, ModelError)> {
    let train = |p: &ClientPartition| {
        model::local_train(
            global,
            &p.data,
            settings,
            p.client_id,
            client_seed(run_seed, round, p.client_id),
        )
        .map_err(|e| (p.client_id, e))
    };
    let mut results: Vec<Result<ClientUpdate, (usize, ModelError)>> = if parallel {
        partitions.par_iter().map(train).collect()
    } else {
        partitions.iter().map(train).collect()
    };
    results.sort_by_key(|r| match r {
        Ok(u) => u.client_id,
        Err((id, _)) => *id,
    });
    results.into_iter().collect()
}

/// Runs `config.rounds` rounds with full participation: broadcast, local
/// training (with the fed_prox coefficient injected), aggregation, then every
/// client evaluates the new global model on its own partition.
pub fn run_federation(config: &RunConfig, partitions: &[ClientPartition]) -> RunResult {
    if partitions.len() < 2 {
        return RunResult::failed(Vec::new(), "need at least two clients".into());
    }
    let mut global = match initial_params(&config.architecture, config.seed) {
        Ok(p) => p,
        Err(e) => return RunResult::failed(Vec::new(), e.to_string()),
    };
    let settings = TrainSettings {
        proximal_mu: config.strategy.proximal_mu(),
        ..config.train
    };
    let mut ordered: Vec<&ClientPartition> = partitions.iter().collect();
    ordered.sort_by_key(|p| p.client_id);
    let sizes: Vec<usize> = ordered.iter().map(|p| p.data.len()).collect();
    let mut rounds = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        let updates = match train_round(
            &global,
            partitions,
            &settings,
            config.seed,
            round,
            config.parallel,
        ) {
            Ok(u) => u,
            Err((client, e)) => {
                return RunResult::failed(rounds, format!("round {round}, client {client}: {e}"))
            }
        };
        global = match aggregate(&config.strategy, &updates, &global) {
            Ok(p) if p.is_finite() => p,
            Ok(_) => {
                return RunResult::failed(rounds, format!("round {round}: non-finite aggregate"))
            }
            Err(e) => return RunResult::failed(rounds, format!("round {round}: {e}")),
        };
        let eval = |p: &&ClientPartition| model::evaluate(&global, &p.data).map(|e| e.accuracy);
        let accs: Result<Vec<f64>, ModelError> = if config.parallel {
            ordered.par_iter().map(eval).collect()
        } else {
            ordered.iter().map(eval).collect()
        };
        let accs = match accs {
            Ok(a) => a,
            Err(e) => return RunResult::failed(rounds, format!("round {round}: {e}")),
        };
        rounds.push(RoundMetrics {
            round,
            weighted_accuracy: weighted_accuracy(&accs, &sizes),
            client_accuracies: accs,
            client_sizes: sizes.clone(),
        });
    }
    RunResult {
        rounds,
        status: RunStatus::Ok,
        failure_reason: None,
        final_params: Some(global),
    }
}

/// Mean of the last five weighted accuracies; exactly zero for a failed run.
/// Runs shorter than the window average what they have.
pub fn fitness(result: &RunResult) -> f64 {
    if result.status == RunStatus::Failed || result.rounds.is_empty() {
        return 0.0;
    }
    let start = result.rounds.len().saturating_sub(FITNESS_WINDOW);
    let window = &result.rounds[start..];
    window.iter().map(|r| r.weighted_accuracy).sum::<f64>() / window.len() as f64
}
