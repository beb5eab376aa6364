mod commands;
mod config;
mod error;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedsel_core::dataset::Scenario;

use crate::config::{BackendKind, ExperimentConfig, Mode, Overrides};
use crate::error::{CliError, CliResult};
use crate::rundir::CONFIG_FILE;

/// Heterogeneity detection and aggregation-strategy selection for simulated
/// federated learning.
#[derive(Parser)]
#[command(name = "fedsel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML experiment file; flags below take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use generated synthetic data.
    #[arg(long, global = true, conflicts_with = "data")]
    synthetic: bool,
    /// CSV dataset.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Label column of the CSV: a header name or a zero-based index.
    #[arg(long, global = true)]
    label_column: Option<String>,
    #[arg(long, global = true)]
    samples: Option<usize>,
    #[arg(long, global = true)]
    features: Option<usize>,
    #[arg(long, global = true)]
    classes: Option<usize>,
    /// Distance between synthetic class centres.
    #[arg(long, global = true)]
    separation: Option<f64>,
    /// iid, label_skew, feature_skew, noisy_label, label_poisoning,
    /// corrupted_client or dirichlet.
    #[arg(long, global = true)]
    scenario: Option<Scenario>,
    #[arg(long, global = true)]
    clients: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    rounds: Option<usize>,
    /// Parent directory for run directories.
    #[arg(long = "out", global = true)]
    output_dir: Option<PathBuf>,
    /// Worker threads for client training and search evaluations.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        /// Also copy the CSV here.
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Split a dataset across clients.
    Partition {
        #[command(flatten)]
        common: Common,
    },
    /// Print the label skew, feature skew and outlier flags.
    Detect {
        #[command(flatten)]
        common: Common,
    },
    /// Ask the advisor for a strategy and run it.
    Recommend {
        #[command(flatten)]
        advisor: AdvisorArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Run one federation with a fixed strategy.
    Run {
        /// Strategy literal, e.g. "{'strategy_name': 'fed_prox', 'proximal_mu': 0.1}".
        #[arg(long)]
        strategy: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Genetic search over strategy configurations.
    Search {
        /// Continue the search stored in this run directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Random-search reference envelope.
    HpoRef {
        #[command(flatten)]
        common: Common,
    },
    /// Compare the approaches over repeated seeds.
    Bench {
        #[arg(long)]
        repetitions: Option<usize>,
        #[command(flatten)]
        advisor: AdvisorArgs,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Clone, Default)]
struct AdvisorArgs {
    /// Use the offline rule-based advisor.
    #[arg(long, conflicts_with = "mock_echo")]
    mock: bool,
    /// Replay replies from a JSON array of strings.
    #[arg(long)]
    mock_echo: Option<PathBuf>,
    /// Free-text description sent instead of the detection report.
    #[arg(long)]
    describe: Option<String>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            synthetic: self.synthetic,
            data: self.data.clone(),
            label_column: self.label_column.clone(),
            samples: self.samples,
            features: self.features,
            classes: self.classes,
            separation: self.separation,
            scenario: self.scenario,
            clients: self.clients,
            seed: self.seed,
            rounds: self.rounds,
            output_dir: self.output_dir.clone(),
            sequential: self.sequential,
            ..Overrides::default()
        }
    }
}

impl AdvisorArgs {
    fn apply(&self, o: &mut Overrides) {
        if self.mock {
            o.backend = Some(BackendKind::Mock);
        }
        if let Some(path) = &self.mock_echo {
            o.backend = Some(BackendKind::Script);
            o.script = Some(path.clone());
        }
        o.description = self.describe.clone();
    }
}

fn load(common: &Common, overrides: Overrides, mode: Mode) -> CliResult<ExperimentConfig> {
    ExperimentConfig::load(common.config.as_deref(), &overrides, mode)
}

fn common(command: &Command) -> &Common {
    match command {
        Command::GenData { common, .. }
        | Command::Partition { common }
        | Command::Detect { common }
        | Command::Recommend { common, .. }
        | Command::Run { common, .. }
        | Command::Search { common, .. }
        | Command::HpoRef { common }
        | Command::Bench { common, .. } => common,
    }
}

fn dispatch(command: Command) -> CliResult<PathBuf> {
    if let Some(jobs) = common(&command).jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    match command {
        Command::GenData { output, common } => {
            let cfg = load(&common, common.overrides(), Mode::GenData)?;
            commands::cmd_gen_data(&cfg, output.as_deref())
        }
        Command::Partition { common } => commands::cmd_partition(&load(&common, common.overrides(), Mode::Partition)?),
        Command::Detect { common } => commands::cmd_detect(&load(&common, common.overrides(), Mode::Detect)?),
        Command::Recommend { advisor, common } => {
            let mut o = common.overrides();
            advisor.apply(&mut o);
            commands::cmd_recommend(&load(&common, o, Mode::Recommend)?)
        }
        Command::Run { strategy, common } => {
            let o = Overrides { strategy, ..common.overrides() };
            commands::cmd_run(&load(&common, o, Mode::Run)?)
        }
        Command::Search { resume, common } => match resume {
            Some(dir) => {
                let snapshot = dir.join(CONFIG_FILE);
                if !snapshot.exists() {
                    return Err(CliError::Usage(format!("{} has no {CONFIG_FILE} to resume from", dir.display())));
                }
                let cfg = ExperimentConfig::load(Some(&snapshot), &Overrides::default(), Mode::Search)?;
                commands::cmd_search(&cfg, Some(&dir))
            }
            None => commands::cmd_search(&load(&common, common.overrides(), Mode::Search)?, None),
        },
        Command::HpoRef { common } => commands::cmd_hpo_ref(&load(&common, common.overrides(), Mode::HpoRef)?),
        Command::Bench { repetitions, advisor, common } => {
            let mut o = Overrides { repetitions, ..common.overrides() };
            advisor.apply(&mut o);
            commands::cmd_bench(&load(&common, o, Mode::Bench)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(dir) => {
            println!("run directory: {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Exhausted { raw_responses, .. } = &e {
                for (i, r) in raw_responses.iter().enumerate() {
                    eprintln!("--- response {} ---\n{r}", i + 1);
                }
            }
            e.exit_code()
        }
    }
}
