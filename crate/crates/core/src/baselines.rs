//! Comparison methods: Bayesian optimization over recorded metrics, and
//! off-policy estimates with greedy or expected-improvement selection.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{incumbent, score};
use crate::aoe_loop::{drive, Estimates, LoopConfig, LoopHistory, LoopState};
use crate::env::{Environment, Interaction};
use crate::error::{Error, Result};
use crate::gp_exact::{fit_hyperparameters, HyperFitConfig};
use crate::kernels::KernelFamily;
use crate::metric::MetricDistribution;
use crate::ope::{dr_estimate, is_estimate, knn_reward_table, logistic_reward_table, OpeEstimate};
use crate::policy::CandidateModel;
use crate::seeds::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaselineKind {
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

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::Bo,
        BaselineKind::IsGreedy,
        BaselineKind::DrGreedy,
        BaselineKind::IsEi,
        BaselineKind::DrEi,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::Bo => "BO",
            BaselineKind::IsGreedy => "IS-g",
            BaselineKind::DrGreedy => "DR-g",
            BaselineKind::IsEi => "IS-EI",
            BaselineKind::DrEi => "DR-EI",
        }
    }
}

/// Candidate params rescaled to `[0, 1]` per coordinate; constant coordinates map to 0.
pub fn normalized_params(candidates: &[CandidateModel]) -> Result<DMatrix<f64>> {
    let d = candidates[0].params.len();
    if d == 0 || candidates.iter().any(|c| c.params.len() != d) {
        return Err(Error::Config("BO needs candidates with equal-length, non-empty params".into()));
    }
    let mut x = DMatrix::from_fn(candidates.len(), d, |i, j| candidates[i].params[j]);
    for mut col in x.column_iter_mut() {
        let (lo, hi) = (col.min(), col.max());
        let span = if hi > lo { hi - lo } else { 1.0 };
        col.apply(|v| *v = (*v - lo) / span);
    }
    Ok(x)
}

/// Predicted feedback for every `(input, decision)` cell from the pooled logs.
pub fn reward_table<E: Environment + ?Sized>(env: &E, logs: &[Interaction], cfg: &LoopConfig) -> Result<DMatrix<f64>> {
    match env.reward_features() {
        Some(features) => logistic_reward_table(features, env.n_decisions(), logs, &cfg.baselines.logistic()),
        None => knn_reward_table(env.n_inputs(), env.n_decisions(), logs, cfg.baselines.knn_neighbours),
    }
}

fn ope_estimates(
    kind: BaselineKind,
    candidates: &[CandidateModel],
    logs: &[Interaction],
    reward: Option<&DMatrix<f64>>,
) -> Result<Vec<OpeEstimate>> {
    candidates
        .par_iter()
        .map(|c| match (kind, reward) {
            (BaselineKind::DrGreedy | BaselineKind::DrEi, Some(r)) => dr_estimate(logs, c, r),
            _ => is_estimate(logs, c),
        })
        .collect()
}

pub fn run_baseline<E: Environment + ?Sized>(
    kind: BaselineKind,
    env: &E,
    candidates: &[CandidateModel],
    cfg: &LoopConfig,
    seed: u64,
) -> Result<LoopHistory> {
    match kind {
        BaselineKind::Bo => run_bo(env, candidates, cfg, seed),
        _ => drive(env, candidates, cfg, kind.name(), seed, |state: &LoopState| {
            let reward = match kind {
                BaselineKind::DrGreedy | BaselineKind::DrEi => Some(reward_table(env, state.logs, cfg)?),
                _ => None,
            };
            let est = ope_estimates(kind, candidates, state.logs, reward.as_ref())?;
            let means: Vec<f64> = est.iter().map(|e| e.mean).collect();
            let stds = est.iter().map(|e| e.variance.sqrt()).collect();
            let scores = match kind {
                BaselineKind::IsGreedy | BaselineKind::DrGreedy => means.clone(),
                _ => {
                    let best = incumbent(state.recorded);
                    est.iter()
                        .map(|e| {
                            let dist = MetricDistribution::Gaussian {
                                mean: e.mean,
                                variance: e.variance,
                            };
                            score(&cfg.acquisition, &dist, best)
                        })
                        .collect::<Result<_>>()?
                }
            };
            Ok(Estimates { means, stds, scores })
        }),
    }
}

/// GP regression from candidate params to recorded metric; only the
/// `(deployed candidate, recorded metric)` pairs are used.
fn run_bo<E: Environment + ?Sized>(
    env: &E,
    candidates: &[CandidateModel],
    cfg: &LoopConfig,
    seed: u64,
) -> Result<LoopHistory> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    let x_all = normalized_params(candidates)?;
    let hyper = HyperFitConfig {
        restarts: cfg.baselines.bo_restarts,
        ..HyperFitConfig::default()
    };
    drive(env, candidates, cfg, "BO", seed, |state: &LoopState| {
        let x = x_all.select_rows(state.deployed.iter());
        let center = state.recorded.iter().sum::<f64>() / state.recorded.len() as f64;
        let y = DVector::from_iterator(state.recorded.len(), state.recorded.iter().map(|r| r - center));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "bo-hyper", state.iteration as u64));
        let gp = fit_hyperparameters(&x, &y, KernelFamily::Matern52, &hyper, &mut rng)?;
        let (mean, cov) = gp.predict_f(&x_all, false)?;
        let var = cov.diagonal();
        let means: Vec<f64> = mean.iter().map(|m| m + center).collect();
        let stds = var.iter().map(|v| v.max(0.0).sqrt()).collect();
        let best = incumbent(state.recorded);
        let scores = if state.last {
            Vec::new()
        } else {
            means
                .iter()
                .zip(var.iter())
                .map(|(m, v)| {
                    let dist = MetricDistribution::Gaussian {
                        mean: *m,
                        variance: v.max(0.0),
                    };
                    score(&cfg.acquisition, &dist, best)
                })
                .collect::<Result<_>>()?
        };
        Ok(Estimates { means, stds, scores })
    })
}
