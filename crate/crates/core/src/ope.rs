//! Off-policy estimates of a candidate's accumulative metric from logged
//! interactions, and the reward models used by the doubly robust estimator.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::env::Interaction;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::policy::CandidateModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpeEstimate {
    pub mean: f64,
    /// Empirical variance of the mean estimate.
    pub variance: f64,
    /// Effective sample size `(Σw)² / Σw²`; zero when no weight is positive.
    pub ess: f64,
}

fn weights(logs: &[Interaction], target: &CandidateModel) -> Result<Vec<f64>> {
    if logs.is_empty() {
        return Err(Error::Empty("interaction log"));
    }
    logs.iter()
        .enumerate()
        .map(|(i, it)| {
            if !(it.propensity > 0.0) {
                return Err(Error::ZeroPropensity { index: i });
            }
            if it.input >= target.n_inputs() || it.decision >= target.n_decisions {
                return Err(Error::Incompatible(format!(
                    "logged ({}, {}) outside model `{}`",
                    it.input, it.decision, target.name
                )));
            }
            Ok(target.prob(it.input, it.decision) / it.propensity)
        })
        .collect()
}

fn summarize(terms: &[f64], w: &[f64]) -> OpeEstimate {
    let n = terms.len() as f64;
    let mean = terms.iter().sum::<f64>() / n;
    let variance = if terms.len() > 1 {
        terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0) / n
    } else {
        0.0
    };
    let (s1, s2) = w.iter().fold((0.0, 0.0), |(a, b), x| (a + x, b + x * x));
    OpeEstimate {
        mean,
        variance,
        ess: if s2 > 0.0 { s1 * s1 / s2 } else { 0.0 },
    }
}

/// Importance sampling with per-interaction logging propensities, so logs
/// from several deployed models can be pooled.
pub fn is_estimate(logs: &[Interaction], target: &CandidateModel) -> Result<OpeEstimate> {
    let w = weights(logs, target)?;
    let terms: Vec<f64> = logs.iter().zip(&w).map(|(it, w)| w * it.feedback).collect();
    Ok(summarize(&terms, &w))
}

/// Doubly robust estimate; `reward[(x, a)]` is the predicted feedback.
pub fn dr_estimate(logs: &[Interaction], target: &CandidateModel, reward: &DMatrix<f64>) -> Result<OpeEstimate> {
    if reward.nrows() != target.n_inputs() || reward.ncols() != target.n_decisions {
        return Err(Error::DimensionMismatch {
            expected: target.n_inputs() * target.n_decisions,
            got: reward.len(),
        });
    }
    let w = weights(logs, target)?;
    let terms: Vec<f64> = logs
        .iter()
        .zip(&w)
        .map(|(it, w)| {
            let x = it.input;
            let (on, off) = target.masses(x);
            let row_sum: f64 = reward.row(x).sum();
            let proposed: f64 = target.proposals[x].iter().map(|&a| reward[(x, a as usize)]).sum();
            let direct = off * (row_sum - proposed) + on * proposed;
            direct + w * (it.feedback - reward[(x, it.decision)])
        })
        .collect();
    Ok(summarize(&terms, &w))
}

/// Multinomial logistic reward model: `P(m = 1 | a, x) = softmax(W x + b)_a`,
/// fitted by maximizing `Σ log softmax_a` on successes and `Σ log(1 − softmax_a)`
/// on failures with an L2 penalty on `W`.
#[derive(Debug, Clone)]
pub struct LogisticRewardConfig {
    pub l2: f64,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for LogisticRewardConfig {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            steps: 300,
            learning_rate: 0.05,
        }
    }
}

fn softmax_rows(logits: &mut DMatrix<f64>) {
    for mut row in logits.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let s = row.sum();
        row /= s;
    }
}

/// Predicted feedback for every `(input, decision)` cell, inputs × decisions.
pub fn logistic_reward_table(
    features: &DMatrix<f64>,
    n_decisions: usize,
    logs: &[Interaction],
    cfg: &LogisticRewardConfig,
) -> Result<DMatrix<f64>> {
    if logs.is_empty() {
        return Err(Error::Empty("interaction log"));
    }
    let d = features.ncols() + 1;
    let design = DMatrix::from_fn(logs.len(), d, |r, c| {
        if c + 1 == d {
            1.0
        } else {
            features[(logs[r].input, c)]
        }
    });
    // Parameters are a d × K matrix in column-major order; the last row is the bias.
    let mut params = vec![0.0; d * n_decisions];
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let n = logs.len() as f64;
    for _ in 0..cfg.steps {
        let w = DMatrix::from_column_slice(d, n_decisions, &params);
        let mut probs = &design * &w;
        softmax_rows(&mut probs);
        // d(−loss)/d logits for one row: success → e_a − s; failure → −s_a (e_a − s)/(1 − s_a).
        let mut dlogits = DMatrix::<f64>::zeros(logs.len(), n_decisions);
        for (r, it) in logs.iter().enumerate() {
            let a = it.decision;
            let sa = probs[(r, a)];
            let coef = if it.feedback > 0.5 { 1.0 } else { -sa / (1.0 - sa).max(1e-12) };
            for k in 0..n_decisions {
                let ind = if k == a { 1.0 } else { 0.0 };
                dlogits[(r, k)] = coef * (ind - probs[(r, k)]);
            }
        }
        // Descent direction on the mean negative log-likelihood.
        let mut grad = -(design.transpose() * &dlogits) / n;
        for k in 0..n_decisions {
            for j in 0..d - 1 {
                grad[(j, k)] += cfg.l2 * w[(j, k)];
            }
        }
        adam.step(&mut params, grad.as_slice());
    }
    let w = DMatrix::from_column_slice(d, n_decisions, &params);
    let full = DMatrix::from_fn(features.nrows(), d, |r, c| if c + 1 == d { 1.0 } else { features[(r, c)] });
    let mut table = full * w;
    softmax_rows(&mut table);
    Ok(table)
}

/// k-nearest-neighbour imputation over input rows of the partially observed
/// mean-feedback matrix. Distances are NaN-aware Euclidean over co-observed
/// columns, rescaled by the fraction observed; a cell is imputed from the `k`
/// nearest rows that observed its column, else the column mean, else the
/// global mean.
pub fn knn_reward_table(n_inputs: usize, n_decisions: usize, logs: &[Interaction], k: usize) -> Result<DMatrix<f64>> {
    if logs.is_empty() {
        return Err(Error::Empty("interaction log"));
    }
    if k == 0 {
        return Err(Error::Config("neighbour count must be positive".into()));
    }
    let mut sum = DMatrix::<f64>::zeros(n_inputs, n_decisions);
    let mut cnt = DMatrix::<f64>::zeros(n_inputs, n_decisions);
    for it in logs {
        sum[(it.input, it.decision)] += it.feedback;
        cnt[(it.input, it.decision)] += 1.0;
    }
    let observed = cnt.map(|c| c > 0.0);
    let value = sum.zip_map(&cnt, |s, c| if c > 0.0 { s / c } else { 0.0 });
    let global = logs.iter().map(|i| i.feedback).sum::<f64>() / logs.len() as f64;
    let col_mean: Vec<f64> = (0..n_decisions)
        .map(|a| {
            let n = (0..n_inputs).filter(|&x| observed[(x, a)]).count();
            if n == 0 {
                global
            } else {
                (0..n_inputs).filter(|&x| observed[(x, a)]).map(|x| value[(x, a)]).sum::<f64>() / n as f64
            }
        })
        .collect();

    let dist = |u: usize, v: usize| -> Option<f64> {
        let mut s = 0.0;
        let mut shared = 0usize;
        for a in 0..n_decisions {
            if observed[(u, a)] && observed[(v, a)] {
                s += (value[(u, a)] - value[(v, a)]).powi(2);
                shared += 1;
            }
        }
        (shared > 0).then(|| (s * n_decisions as f64 / shared as f64).sqrt())
    };

    let mut table = value.clone();
    for u in 0..n_inputs {
        if (0..n_decisions).all(|a| observed[(u, a)]) {
            continue;
        }
        let mut neighbours: Vec<(usize, f64)> = (0..n_inputs)
            .filter(|&v| v != u)
            .filter_map(|v| dist(u, v).map(|d| (v, d)))
            .collect();
        neighbours.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        for a in 0..n_decisions {
            if observed[(u, a)] {
                continue;
            }
            let donors: Vec<f64> = neighbours
                .iter()
                .filter(|(v, _)| observed[(*v, a)])
                .take(k)
                .map(|(v, _)| value[(*v, a)])
                .collect();
            table[(u, a)] = if donors.is_empty() {
                col_mean[a]
            } else {
                donors.iter().sum::<f64>() / donors.len() as f64
            };
        }
    }
    Ok(table)
}
