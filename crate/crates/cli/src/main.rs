use std::path::PathBuf;
use std::process::ExitCode;

use aoe::acquisition::AcquisitionKind;
use aoe::harness::{self, EnvironmentSpec, ExperimentConfig, Method};
use aoe::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;

#[derive(Parser)]
#[command(name = "aoe", version, about = "Select models by simulated online experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Letter-recognition classifiers deployed as a contextual bandit.
    RunClassification {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        env: ClassificationArgs,
    },
    /// Recommenders deployed against a rating-table simulator.
    RunRecsys {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        env: RecsysArgs,
    },
    /// Rebuild summary.csv from the run files of an experiment directory.
    Report {
        /// Directory holding `<method>/run_<i>.json`.
        dir: PathBuf,
        /// Where to write the summary (default: `<dir>/summary.csv`).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Parse and check a config file without running it.
    ValidateConfig { config: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Acquisition {
    Ei,
    Pi,
    Ucb,
}

/// Flags shared by both experiments; each overrides the matching config key.
#[derive(Args)]
struct CommonArgs {
    /// JSON experiment config; flags win over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    /// Comma-separated subset of AOE,BO,IS-g,DR-g,IS-EI,DR-EI.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    master_seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    num_inducing: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    metric_samples: Option<usize>,
    #[arg(long, value_enum)]
    acquisition: Option<Acquisition>,
    #[arg(long)]
    record_wall_time: bool,
}

#[derive(Args)]
struct ClassificationArgs {
    #[arg(long)]
    data_path: Option<PathBuf>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    sample_size: Option<usize>,
    /// Grid points along log2 C.
    #[arg(long)]
    grid_c: Option<usize>,
    /// Grid points along log2 gamma.
    #[arg(long)]
    grid_gamma: Option<usize>,
}

#[derive(Args)]
struct RecsysArgs {
    #[arg(long)]
    ratings_path: Option<PathBuf>,
    #[arg(long)]
    n_users: Option<usize>,
    #[arg(long)]
    n_items: Option<usize>,
    #[arg(long)]
    top_n: Option<usize>,
    #[arg(long)]
    item_threshold: Option<f64>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn base_config(path: &Option<PathBuf>, default: ExperimentConfig) -> aoe::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(default),
    }
}

fn apply_common(cfg: &mut ExperimentConfig, a: CommonArgs) -> aoe::Result<()> {
    set(&mut cfg.name, a.name);
    if let Some(names) = a.methods {
        cfg.methods = names.iter().map(|n| n.trim().parse::<Method>()).collect::<aoe::Result<_>>()?;
    }
    set(&mut cfg.search.budget, a.budget);
    set(&mut cfg.repeats, a.repeats);
    set(&mut cfg.master_seed, a.master_seed);
    set(&mut cfg.output_dir, a.output_dir);
    set(&mut cfg.epsilon, a.epsilon);
    let s = &mut cfg.search.surrogate;
    set(&mut s.num_inducing, a.num_inducing);
    set(&mut s.train.epochs, a.epochs);
    set(&mut s.train.batch_size, a.batch_size);
    set(&mut s.train.learning_rate, a.learning_rate);
    set(&mut s.metric_samples, a.metric_samples);
    if let Some(kind) = a.acquisition {
        cfg.search.acquisition.kind = match kind {
            Acquisition::Ei => AcquisitionKind::ExpectedImprovement,
            Acquisition::Pi => AcquisitionKind::ProbabilityOfImprovement,
            Acquisition::Ucb => AcquisitionKind::UpperConfidenceBound,
        };
    }
    if a.record_wall_time {
        cfg.search.record_wall_time = true;
    }
    Ok(())
}

fn run(cfg: ExperimentConfig) -> aoe::Result<()> {
    cfg.validate()?;
    let rows = harness::run_experiment(&cfg)?;
    print!("{}", harness::summary_csv(&rows));
    eprintln!("wrote {}", cfg.experiment_dir().display());
    Ok(())
}

fn execute(cli: Cli) -> aoe::Result<()> {
    match cli.command {
        Command::RunClassification { common, env } => {
            let mut cfg = base_config(&common.config, ExperimentConfig::classification())?;
            let EnvironmentSpec::Classification(spec) = &mut cfg.environment else {
                return Err(Error::Config("config describes a recommender experiment; use run-recsys".into()));
            };
            set(&mut spec.data_path, env.data_path);
            set(&mut spec.n_train, env.n_train);
            set(&mut spec.pool_size, env.pool_size);
            set(&mut spec.sample_size, env.sample_size);
            set(&mut spec.grid.n_c, env.grid_c);
            set(&mut spec.grid.n_gamma, env.grid_gamma);
            apply_common(&mut cfg, common)?;
            run(cfg)
        }
        Command::RunRecsys { common, env } => {
            let mut cfg = base_config(&common.config, ExperimentConfig::recsys())?;
            let EnvironmentSpec::Recsys(spec) = &mut cfg.environment else {
                return Err(Error::Config("config describes a classification experiment; use run-classification".into()));
            };
            set(&mut spec.ratings_path, env.ratings_path);
            set(&mut spec.table.n_users, env.n_users);
            set(&mut spec.table.n_items, env.n_items);
            set(&mut spec.top_n, env.top_n);
            set(&mut spec.table.item_threshold, env.item_threshold);
            apply_common(&mut cfg, common)?;
            run(cfg)
        }
        Command::Report { dir, output } => {
            let records = harness::load_runs(&dir)?;
            let rows = harness::report(&records)?;
            harness::write_summary(&output.unwrap_or_else(|| dir.join("summary.csv")), &rows)?;
            print!("{}", harness::summary_csv(&rows));
            Ok(())
        }
        Command::ValidateConfig { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            println!("{}: ok ({} methods, {} repeats)", config.display(), cfg.methods.len(), cfg.repeats);
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::InvalidHyperparameter(_) => 2,
        Error::Data(_) | Error::Io(_) | Error::Json(_) | Error::UnknownId { .. } | Error::Empty(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
