//! Experiment configuration, repeated seeded runs and aggregate reporting.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aoe_loop::{run_aoe, LoopConfig, LoopHistory};
use crate::baselines::{run_baseline, BaselineKind};
use crate::candidates::{build_recommender_candidates, build_svm_candidates, default_recommenders, RecommenderKind, SvmGrid};
use crate::env::data::{load_letter, load_ratings};
use crate::env::{build_recsys_env, ClassificationEnv, ClassificationSetup, Environment, RecsysConfig, RecsysEnv};
use crate::error::{Error, Result};
use crate::policy::CandidateModel;
use crate::seeds::derive_seed;
use crate::svgp::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;
pub const RUN_VERSION: u32 = 1;
pub const SUMMARY_HEADER: &str = "method,iteration,gap_mean,gap_std,rmse_mean,rmse_std";

/// Published full-scale classification results at iteration 20, for reference only.
pub const REFERENCE_AOE_GAP: f64 = 0.0029;
pub const REFERENCE_AOE_RMSE: f64 = 0.011;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "AOE")]
    Aoe,
    #[serde(rename = "BO")]
    Bo,
    #[serde(rename = "IS-g")]
    IsGreedy,
    #[serde(rename = "DR-g")]
    DrGreedy,
    #[serde(rename = "IS-EI")]
    IsEi,
    #[serde(rename = "DR-EI")]
    DrEi,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Aoe,
        Method::Bo,
        Method::IsGreedy,
        Method::DrGreedy,
        Method::IsEi,
        Method::DrEi,
    ];

    pub fn name(&self) -> &'static str {
        match self.baseline() {
            None => "AOE",
            Some(b) => b.name(),
        }
    }

    fn baseline(&self) -> Option<BaselineKind> {
        match self {
            Method::Aoe => None,
            Method::Bo => Some(BaselineKind::Bo),
            Method::IsGreedy => Some(BaselineKind::IsGreedy),
            Method::DrGreedy => Some(BaselineKind::DrGreedy),
            Method::IsEi => Some(BaselineKind::IsEi),
            Method::DrEi => Some(BaselineKind::DrEi),
        }
    }

    pub fn run<E: Environment + ?Sized>(
        &self,
        env: &E,
        candidates: &[CandidateModel],
        cfg: &LoopConfig,
        seed: u64,
    ) -> Result<LoopHistory> {
        match self.baseline() {
            None => run_aoe(env, candidates, cfg, seed),
            Some(kind) => run_baseline(kind, env, candidates, cfg, seed),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassificationSpec {
    pub data_path: PathBuf,
    /// Rows used to train the candidate classifiers.
    pub n_train: usize,
    /// Hold-out rows forming the input distribution.
    pub pool_size: usize,
    /// Inputs per deployment.
    pub sample_size: usize,
    pub grid: SvmGrid,
}

impl Default for ClassificationSpec {
    fn default() -> Self {
        Self {
            data_path: PathBuf::from("data/letter-recognition.data"),
            n_train: 200,
            pool_size: 2000,
            sample_size: 200,
            grid: SvmGrid::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecsysSpec {
    pub ratings_path: PathBuf,
    pub table: RecsysConfig,
    pub recommenders: Vec<RecommenderKind>,
    /// Items proposed per user by each recommender.
    pub top_n: usize,
}

impl Default for RecsysSpec {
    fn default() -> Self {
        Self {
            ratings_path: PathBuf::from("data/ml-100k/u.data"),
            table: RecsysConfig::default(),
            recommenders: default_recommenders(),
            top_n: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvironmentSpec {
    Classification(ClassificationSpec),
    Recsys(RecsysSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub name: String,
    pub environment: EnvironmentSpec,
    /// Exploration rate of every candidate.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "all_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub search: LoopConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_epsilon() -> f64 {
    0.05
}

fn all_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_repeats() -> usize {
    10
}

fn desktop_training() -> TrainConfig {
    TrainConfig {
        epochs: 100,
        batch_size: 200,
        learning_rate: 0.02,
        optimize_inducing: true,
        ..TrainConfig::default()
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    /// Desktop-scale classification benchmark: 10 iterations, 200 inducing
    /// points, short surrogate training with learned inducing inputs.
    pub fn classification() -> Self {
        let mut cfg = Self::with_environment("classification", EnvironmentSpec::Classification(ClassificationSpec::default()));
        cfg.search.surrogate.train = desktop_training();
        cfg
    }

    /// Desktop-scale recommender benchmark: 5 iterations, 200 inducing points.
    pub fn recsys() -> Self {
        let mut cfg = Self::with_environment("recsys", EnvironmentSpec::Recsys(RecsysSpec::default()));
        cfg.search.budget = 5;
        cfg.search.surrogate.train = desktop_training();
        cfg
    }

    fn with_environment(name: &str, environment: EnvironmentSpec) -> Self {
        Self {
            version: CONFIG_VERSION,
            name: name.into(),
            environment,
            epsilon: default_epsilon(),
            methods: all_methods(),
            repeats: default_repeats(),
            master_seed: 0,
            search: LoopConfig::default(),
            output_dir: default_output(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == "." || self.name == ".." {
            return Err(Error::Config(format!("experiment name `{}` is not a plain directory name", self.name)));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("method list is empty".into()));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(Error::Config("method list has duplicates".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        match &self.environment {
            EnvironmentSpec::Classification(c) => {
                if c.n_train == 0 || c.pool_size == 0 || c.sample_size == 0 || c.sample_size > c.pool_size {
                    return Err(Error::Config("classification sizes must be positive with sample_size <= pool_size".into()));
                }
                if c.grid.n_c == 0 || c.grid.n_gamma == 0 {
                    return Err(Error::Config("SVM grid must have at least one point per axis".into()));
                }
            }
            EnvironmentSpec::Recsys(r) => {
                if r.recommenders.is_empty() || r.top_n == 0 {
                    return Err(Error::Config("recommender list and top_n must be non-empty".into()));
                }
                if r.table.n_users == 0 || r.table.n_items == 0 || r.table.rounds_per_user == 0 || r.table.embed_dim == 0 {
                    return Err(Error::Config("recommender table sizes must be positive".into()));
                }
            }
        }
        self.search.validate()
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }
}

/// A built environment with its candidate pool and their exact metrics.
pub struct Prepared {
    env: PreparedEnv,
    pub candidates: Vec<CandidateModel>,
    pub true_metrics: Vec<f64>,
}

enum PreparedEnv {
    Classification(ClassificationEnv),
    Recsys(RecsysEnv),
}

impl Prepared {
    pub fn environment(&self) -> &dyn Environment {
        match &self.env {
            PreparedEnv::Classification(e) => e,
            PreparedEnv::Recsys(e) => e,
        }
    }

    /// Run one method with the environment reseeded to `seed`.
    pub fn run(&self, method: Method, cfg: &LoopConfig, seed: u64) -> Result<LoopHistory> {
        match &self.env {
            PreparedEnv::Classification(e) => method.run(&e.with_seed(seed), &self.candidates, cfg, seed),
            PreparedEnv::Recsys(e) => method.run(&e.with_seed(seed), &self.candidates, cfg, seed),
        }
    }
}

/// Load data and build the environment and candidates; these are shared by
/// every method and repeat of the experiment.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let seed = derive_seed(cfg.master_seed, "setup", 0);
    let (env, candidates) = match &cfg.environment {
        EnvironmentSpec::Classification(spec) => {
            let data = load_letter(&spec.data_path)?;
            let setup = ClassificationSetup::split(&data, spec.n_train, spec.pool_size, seed)?;
            let candidates = build_svm_candidates(
                &setup.train_features,
                &setup.train_labels,
                setup.n_classes,
                &setup.pool_features,
                &spec.grid,
                cfg.epsilon,
            )?;
            let env = ClassificationEnv::new(
                &setup.pool_features,
                setup.pool_labels,
                setup.n_classes,
                spec.sample_size,
                seed,
            )?;
            (PreparedEnv::Classification(env), candidates)
        }
        EnvironmentSpec::Recsys(spec) => {
            let ratings = load_ratings(&spec.ratings_path)?;
            let (env, train) = build_recsys_env(&ratings, &spec.table, seed)?;
            let candidates = build_recommender_candidates(
                env.n_inputs(),
                env.n_decisions(),
                &train,
                &spec.recommenders,
                spec.top_n.min(env.n_decisions()),
                cfg.epsilon,
                seed,
            )?;
            (PreparedEnv::Recsys(env), candidates)
        }
    };
    let mut prepared = Prepared {
        env,
        candidates,
        true_metrics: Vec::new(),
    };
    let env = prepared.environment();
    prepared.true_metrics = prepared
        .candidates
        .par_iter()
        .map(|c| env.true_metric(c))
        .collect::<Result<_>>()?;
    Ok(prepared)
}

/// One `(method, repeat)` run as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: u32,
    pub experiment: String,
    pub method: Method,
    pub repeat: usize,
    pub seed: u64,
    pub true_metrics: Vec<f64>,
    pub history: LoopHistory,
}

impl RunRecord {
    /// `(metric gap, RMSE)` per iteration, measured against the true metrics.
    pub fn errors(&self) -> Vec<(f64, f64)> {
        let best = self.true_metrics.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.history
            .iterations
            .iter()
            .map(|r| (best - self.true_metrics[r.estimated_best], rmse(&r.estimated_means, &self.true_metrics)))
            .collect()
    }
}

pub fn rmse(estimates: &[f64], truth: &[f64]) -> f64 {
    let n = truth.len().max(1) as f64;
    (estimates.iter().zip(truth).map(|(e, t)| (e - t).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn run_seed(master: u64, method: Method, repeat: usize) -> u64 {
    derive_seed(master, method.name(), repeat as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    /// One-based iteration number.
    pub iteration: usize,
    pub gap_mean: f64,
    pub gap_std: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
}

/// Run every `(method, repeat)` pair and return the records ordered by
/// method (as listed in the config) then repeat.
pub fn run_all(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<Vec<RunRecord>> {
    let jobs: Vec<(Method, usize)> = cfg
        .methods
        .iter()
        .flat_map(|m| (0..cfg.repeats).map(move |i| (*m, i)))
        .collect();
    jobs.par_iter()
        .map(|&(method, repeat)| {
            let seed = run_seed(cfg.master_seed, method, repeat);
            info!("{}: {method} repeat {repeat} (seed {seed})", cfg.name);
            let history = prepared.run(method, &cfg.search, seed)?;
            Ok(RunRecord {
                version: RUN_VERSION,
                experiment: cfg.name.clone(),
                method,
                repeat,
                seed,
                true_metrics: prepared.true_metrics.clone(),
                history,
            })
        })
        .collect()
}

pub fn run_path(dir: &Path, method: Method, repeat: usize) -> PathBuf {
    dir.join(method.name()).join(format!("run_{repeat}.json"))
}

/// Full experiment: run, write every history and the summary CSV.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    cfg.validate()?;
    let prepared = prepare(cfg)?;
    let records = run_all(cfg, &prepared)?;
    let dir = cfg.experiment_dir();
    for r in &records {
        let path = run_path(&dir, r.method, r.repeat);
        fs::create_dir_all(path.parent().expect("run path has a parent"))?;
        fs::write(&path, serde_json::to_string(r)?)?;
    }
    let rows = report(&records)?;
    write_summary(&dir.join("summary.csv"), &rows)?;
    Ok(rows)
}

/// Per-method, per-iteration mean and population standard deviation of the
/// metric gap and RMSE across repeats. Methods appear in first-seen order.
pub fn report(records: &[RunRecord]) -> Result<Vec<ReportRow>> {
    if records.is_empty() {
        return Err(Error::Empty("run records"));
    }
    let mut order: Vec<Method> = Vec::new();
    let mut by_method: BTreeMap<Method, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        if !order.contains(&r.method) {
            order.push(r.method);
        }
        by_method.entry(r.method).or_default().push(r);
    }
    let mut rows = Vec::new();
    for method in order {
        let runs = &by_method[&method];
        let errors: Vec<Vec<(f64, f64)>> = runs.iter().map(|r| r.errors()).collect();
        let n_iter = errors[0].len();
        if errors.iter().any(|e| e.len() != n_iter) {
            return Err(Error::Data(format!("{method}: repeats have different iteration counts")));
        }
        for it in 0..n_iter {
            let gaps: Vec<f64> = errors.iter().map(|e| e[it].0).collect();
            let rmses: Vec<f64> = errors.iter().map(|e| e[it].1).collect();
            let (gap_mean, gap_std) = mean_std(&gaps);
            let (rmse_mean, rmse_std) = mean_std(&rmses);
            rows.push(ReportRow {
                method: method.name().to_string(),
                iteration: it + 1,
                gap_mean,
                gap_std,
                rmse_mean,
                rmse_std,
            });
        }
    }
    Ok(rows)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn summary_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.8},{:.8},{:.8},{:.8}\n",
            r.method, r.iteration, r.gap_mean, r.gap_std, r.rmse_mean, r.rmse_std
        ));
    }
    out
}

pub fn write_summary(path: &Path, rows: &[ReportRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, summary_csv(rows))?;
    Ok(())
}

/// Read every `<method>/run_<i>.json` below an experiment directory, ordered
/// by method then repeat.
pub fn load_runs(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut records = Vec::new();
    for method in Method::ALL {
        let mdir = dir.join(method.name());
        if !mdir.is_dir() {
            continue;
        }
        for entry in fs::read_dir(&mdir)? {
            let path = entry?.path();
            let is_run = path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("run_") && n.ends_with(".json"));
            if is_run {
                let text = fs::read_to_string(&path)?;
                let record: RunRecord = serde_json::from_str(&text)
                    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                records.push(record);
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Data(format!("no run files under {}", dir.display())));
    }
    records.sort_by_key(|r| (r.method, r.repeat));
    Ok(records)
}
