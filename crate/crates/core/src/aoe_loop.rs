//! The selection loop: deploy a candidate, collect its interactions, refit
//! the surrogate on everything collected so far, score every candidate and
//! deploy the most promising one not yet tried.

use std::collections::BTreeSet;
use std::time::Instant;

use log::{info, warn};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{incumbent, score, select_next, AcquisitionConfig};
use crate::env::{Environment, Interaction};
use crate::error::{Error, Result};
use crate::kernels::KernelParams;
use crate::metric::{BinaryMetricEngine, MetricDistribution, DEFAULT_SAMPLES};
use crate::ope::LogisticRewardConfig;
use crate::policy::{CandidateModel, CompactPolicy, EvalGrid};
use crate::seeds::derive_seed;
use crate::svgp::{init_inducing, train_svgp, Likelihood, SvgpData, SvgpPosterior, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub num_inducing: usize,
    pub train: TrainConfig,
    /// Joint metric samples per candidate for the acquisition function.
    pub metric_samples: usize,
    pub initial_variance: f64,
    /// Starting lengthscale; `None` uses the median distance between encoded
    /// points, computed separately for the input and decision blocks.
    pub initial_lengthscale: Option<f64>,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            num_inducing: 200,
            train: TrainConfig::default(),
            metric_samples: DEFAULT_SAMPLES,
            initial_variance: 1.0,
            initial_lengthscale: None,
        }
    }
}

/// Settings of the off-policy baselines' reward models and the BO baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub knn_neighbours: usize,
    pub logistic_l2: f64,
    pub logistic_steps: usize,
    pub logistic_learning_rate: f64,
    pub bo_restarts: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        let lr = LogisticRewardConfig::default();
        Self {
            knn_neighbours: 5,
            logistic_l2: lr.l2,
            logistic_steps: lr.steps,
            logistic_learning_rate: lr.learning_rate,
            bo_restarts: 4,
        }
    }
}

impl BaselineConfig {
    pub fn logistic(&self) -> LogisticRewardConfig {
        LogisticRewardConfig {
            l2: self.logistic_l2,
            steps: self.logistic_steps,
            learning_rate: self.logistic_learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub budget: usize,
    pub surrogate: SurrogateConfig,
    pub acquisition: AcquisitionConfig,
    pub baselines: BaselineConfig,
    /// Store per-iteration wall time in the history (makes histories differ between runs).
    pub record_wall_time: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            budget: 10,
            surrogate: SurrogateConfig::default(),
            acquisition: AcquisitionConfig::default(),
            baselines: BaselineConfig::default(),
            record_wall_time: false,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Config("budget must be >= 1".into()));
        }
        if self.surrogate.num_inducing == 0 || self.surrogate.metric_samples == 0 {
            return Err(Error::Config("inducing points and metric samples must be >= 1".into()));
        }
        if !(self.surrogate.initial_variance > 0.0) || self.surrogate.initial_lengthscale.is_some_and(|l| !(l > 0.0)) {
            return Err(Error::Config("initial kernel parameters must be positive".into()));
        }
        if self.baselines.knn_neighbours == 0 {
            return Err(Error::Config("kNN neighbour count must be >= 1".into()));
        }
        self.surrogate.train.validate()?;
        self.acquisition.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub deployed: usize,
    pub interactions: Vec<Interaction>,
    pub recorded_metric: f64,
    pub estimated_means: Vec<f64>,
    pub estimated_stds: Vec<f64>,
    pub estimated_best: usize,
    /// Seconds spent in this iteration, when recording is enabled.
    pub wall_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopHistory {
    pub method: String,
    pub seed: u64,
    pub iterations: Vec<IterationRecord>,
}

impl LoopHistory {
    pub fn deployed(&self) -> Vec<usize> {
        self.iterations.iter().map(|r| r.deployed).collect()
    }

    pub fn total_interactions(&self) -> usize {
        self.iterations.iter().map(|r| r.interactions.len()).sum()
    }

    pub fn final_estimated_best(&self) -> Option<usize> {
        self.iterations.last().map(|r| r.estimated_best)
    }
}

/// What a method sees when it estimates: everything collected so far.
pub(crate) struct LoopState<'a> {
    pub iteration: usize,
    pub logs: &'a [Interaction],
    pub deployed: &'a [usize],
    pub recorded: &'a [f64],
    /// No further deployment follows, so acquisition scores are not needed.
    pub last: bool,
}

pub(crate) struct Estimates {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Acquisition scores; ignored on the last iteration.
    pub scores: Vec<f64>,
}

/// Index of the largest value; ties go to the lowest index, NaN never wins.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] || values[best].is_nan() {
            best = i;
        }
    }
    best
}

/// Shared loop skeleton: a uniformly random first deployment, then the
/// method's own estimates and scores decide the rest.
pub(crate) fn drive<E, F>(
    env: &E,
    candidates: &[CandidateModel],
    cfg: &LoopConfig,
    method: &str,
    seed: u64,
    mut estimate: F,
) -> Result<LoopHistory>
where
    E: Environment + ?Sized,
    F: FnMut(&LoopState) -> Result<Estimates>,
{
    cfg.validate()?;
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    let budget = if cfg.budget > candidates.len() {
        warn!(
            "{method}: budget {} exceeds {} candidates, truncating",
            cfg.budget,
            candidates.len()
        );
        candidates.len()
    } else {
        cfg.budget
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "first-deployment", 0));
    let mut next = rng.random_range(0..candidates.len());
    let mut logs: Vec<Interaction> = Vec::new();
    let mut deployed = Vec::new();
    let mut recorded = Vec::new();
    let mut iterations = Vec::with_capacity(budget);
    for iteration in 0..budget {
        let start = Instant::now();
        let dep = env.deploy(&candidates[next], iteration as u64)?;
        logs.extend_from_slice(&dep.interactions);
        deployed.push(next);
        recorded.push(dep.recorded_metric);
        let last = iteration + 1 == budget;
        let est = estimate(&LoopState {
            iteration,
            logs: &logs,
            deployed: &deployed,
            recorded: &recorded,
            last,
        })?;
        let estimated_best = argmax(&est.means);
        info!(
            "{method} iter {iteration}: deployed {next} recorded {:.4} estimated best {estimated_best} ({:.4})",
            dep.recorded_metric, est.means[estimated_best]
        );
        let this = next;
        if !last {
            next = select_next(&est.scores, &deployed)?;
        }
        iterations.push(IterationRecord {
            iteration,
            deployed: this,
            interactions: dep.interactions,
            recorded_metric: dep.recorded_metric,
            estimated_means: est.means,
            estimated_stds: est.stds,
            estimated_best,
            wall_time: cfg.record_wall_time.then(|| start.elapsed().as_secs_f64()),
        });
    }
    Ok(LoopHistory {
        method: method.to_string(),
        seed,
        iterations,
    })
}

/// Median pairwise Euclidean distance over (at most) the first 500 rows;
/// 1.0 when every row coincides.
pub fn median_distance(points: &nalgebra::DMatrix<f64>) -> f64 {
    let n = points.nrows().min(500);
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in 0..i {
            d.push((points.row(i) - points.row(j)).norm());
        }
    }
    d.retain(|v| *v > 0.0);
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    *d.select_nth_unstable_by(mid, f64::total_cmp).1
}

/// Fit a Bernoulli sparse GP to the logged `(input, decision, feedback)` triples.
pub fn fit_surrogate<E: Environment + ?Sized>(
    env: &E,
    logs: &[Interaction],
    cfg: &SurrogateConfig,
    seed: u64,
) -> Result<SvgpPosterior> {
    if logs.is_empty() {
        return Err(Error::Empty("interaction log"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "surrogate-init", 0));
    let encoder = env.surrogate_encoder(&mut rng)?;
    let pairs: Vec<(usize, usize)> = logs.iter().map(|i| (i.input, i.decision)).collect();
    let distinct: Vec<(usize, usize)> = pairs.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let points = encoder.encode(&distinct)?;
    let di = encoder.input.dim();
    let lengthscales = match cfg.initial_lengthscale {
        Some(l) => vec![l; encoder.dim()],
        None => {
            // Separate medians for the input and decision blocks.
            let li = median_distance(&points.columns(0, di).into_owned());
            let ld = median_distance(&points.columns(di, encoder.dim() - di).into_owned());
            (0..encoder.dim()).map(|d| if d < di { li } else { ld }).collect()
        }
    };
    let z = init_inducing(&points, cfg.num_inducing, &mut rng)?;
    let kernel = KernelParams::new(env.surrogate_kernel(), cfg.initial_variance, lengthscales)?;
    let init = SvgpPosterior::from_prior(z, kernel, Likelihood::Bernoulli, Some(encoder))?;
    let data = SvgpData::pairs(pairs, DVector::from_iterator(logs.len(), logs.iter().map(|i| i.feedback)));
    let train = TrainConfig {
        seed: derive_seed(seed, "surrogate-train", 0),
        ..cfg.train.clone()
    };
    Ok(train_svgp(&data, &init, &train)?.0)
}

/// Run the surrogate-driven selection loop.
pub fn run_aoe<E: Environment + ?Sized>(
    env: &E,
    candidates: &[CandidateModel],
    cfg: &LoopConfig,
    seed: u64,
) -> Result<LoopHistory> {
    let grid = EvalGrid::full(env.n_inputs(), env.n_decisions());
    let policies: Vec<CompactPolicy> = candidates
        .par_iter()
        .map(|m| CompactPolicy::from_model(m, &grid))
        .collect::<Result<_>>()?;
    let grid_pairs = grid.pairs();
    drive(env, candidates, cfg, "AOE", seed, |state| {
        let post = fit_surrogate(
            env,
            state.logs,
            &cfg.surrogate,
            derive_seed(seed, "aoe-surrogate", state.iteration as u64),
        )?;
        let w = post.encode_pairs(&grid_pairs)?;
        let engine = BinaryMetricEngine::new(&post, &w, env.n_decisions())?;
        let means: Vec<f64> = policies.par_iter().map(|p| engine.mean(p)).collect();
        let sample_seed = derive_seed(seed, "aoe-metric", state.iteration as u64);
        let samples = engine.samples(&policies, cfg.surrogate.metric_samples, sample_seed);
        let best_recorded = incumbent(state.recorded);
        let dists: Vec<MetricDistribution> = samples
            .into_iter()
            .map(|s| MetricDistribution::Samples {
                samples: s,
                seed: sample_seed,
            })
            .collect();
        let stds = dists.iter().map(|d| d.std()).collect();
        let scores = if state.last {
            Vec::new()
        } else {
            dists
                .iter()
                .map(|d| score(&cfg.acquisition, d, best_recorded))
                .collect::<Result<_>>()?
        };
        Ok(Estimates { means, stds, scores })
    })
}
