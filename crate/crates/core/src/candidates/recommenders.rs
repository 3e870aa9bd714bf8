//! Matrix-completion recommenders trained on a sample of response-table cells.
//! Each one scores every (user, item) cell and proposes its top items.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::CandidateModel;
use crate::seeds::derive_seed;

/// Observed training cell `(user, item, value)`.
pub type Observation = (usize, usize, f64);

const ALS_SWEEPS: usize = 20;
const ALS_L2: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RecommenderKind {
    /// Global mean plus a rank-`rank` factorization fitted by alternating least squares.
    Factorization { rank: usize },
    UserMean,
    ItemMean,
    GlobalMean,
    /// Mean-centred user-based nearest neighbours.
    UserKnn { k: usize },
    Uniform,
}

impl RecommenderKind {
    pub fn label(&self) -> String {
        match self {
            RecommenderKind::Factorization { rank } => format!("als-r{rank}"),
            RecommenderKind::UserMean => "user-mean".into(),
            RecommenderKind::ItemMean => "item-mean".into(),
            RecommenderKind::GlobalMean => "global-mean".into(),
            RecommenderKind::UserKnn { k } => format!("user-knn-k{k}"),
            RecommenderKind::Uniform => "uniform".into(),
        }
    }
}

/// The ten-model pool.
pub fn default_recommenders() -> Vec<RecommenderKind> {
    use RecommenderKind::*;
    vec![
        Factorization { rank: 1 },
        Factorization { rank: 2 },
        Factorization { rank: 4 },
        Factorization { rank: 8 },
        UserMean,
        ItemMean,
        GlobalMean,
        UserKnn { k: 5 },
        UserKnn { k: 20 },
        Uniform,
    ]
}

fn check(n_users: usize, n_items: usize, train: &[Observation]) -> Result<()> {
    if n_users == 0 || n_items == 0 {
        return Err(Error::Empty("response table"));
    }
    if train.is_empty() {
        return Err(Error::Empty("recommender training cells"));
    }
    for &(u, i, v) in train {
        if u >= n_users || i >= n_items {
            return Err(Error::Data(format!("training cell ({u}, {i}) outside {n_users}x{n_items} table")));
        }
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("training value at ({u}, {i})")));
        }
    }
    Ok(())
}

fn global_mean(train: &[Observation]) -> f64 {
    train.iter().map(|o| o.2).sum::<f64>() / train.len() as f64
}

/// Per-row means of the observed cells along one axis; unobserved rows get `fallback`.
fn axis_means(n: usize, train: &[Observation], key: impl Fn(&Observation) -> usize, fallback: f64) -> Vec<f64> {
    let mut sum = vec![0.0; n];
    let mut cnt = vec![0usize; n];
    for o in train {
        sum[key(o)] += o.2;
        cnt[key(o)] += 1;
    }
    (0..n)
        .map(|r| if cnt[r] > 0 { sum[r] / cnt[r] as f64 } else { fallback })
        .collect()
}

/// Ridge solve for one side of the factorization: for each row, regress its
/// residuals on the other side's factors.
fn als_half(
    n: usize,
    rank: usize,
    rows: &[Vec<(usize, f64)>],
    other: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, rank);
    for (r, obs) in rows.iter().enumerate() {
        let mut a = DMatrix::<f64>::identity(rank, rank) * ALS_L2;
        let mut b = DVector::<f64>::zeros(rank);
        for &(c, v) in obs {
            let f = other.row(c).transpose();
            a += &f * f.transpose();
            b += f * v;
        }
        let sol = a.cholesky().expect("ridge system is positive definite").solve(&b);
        out.row_mut(r).copy_from(&sol.transpose());
    }
    out
}

fn factorization(n_users: usize, n_items: usize, train: &[Observation], rank: usize, seed: u64) -> DMatrix<f64> {
    let mu = global_mean(train);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "als-init", rank as u64));
    let mut items = DMatrix::from_fn(n_items, rank, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
    let mut by_user = vec![Vec::new(); n_users];
    let mut by_item = vec![Vec::new(); n_items];
    for &(u, i, v) in train {
        by_user[u].push((i, v - mu));
        by_item[i].push((u, v - mu));
    }
    let mut users = DMatrix::zeros(n_users, rank);
    for _ in 0..ALS_SWEEPS {
        users = als_half(n_users, rank, &by_user, &items);
        items = als_half(n_items, rank, &by_item, &users);
    }
    (users * items.transpose()).add_scalar(mu)
}

fn user_knn(n_users: usize, n_items: usize, train: &[Observation], k: usize) -> DMatrix<f64> {
    let mu = global_mean(train);
    let user_mean = axis_means(n_users, train, |o| o.0, mu);
    let mut centred = DMatrix::<f64>::zeros(n_users, n_items);
    let mut seen = DMatrix::<bool>::from_element(n_users, n_items, false);
    for &(u, i, v) in train {
        centred[(u, i)] = v - user_mean[u];
        seen[(u, i)] = true;
    }
    let norms: Vec<f64> = (0..n_users).map(|u| centred.row(u).norm()).collect();
    let mut scores = DMatrix::zeros(n_users, n_items);
    for u in 0..n_users {
        let mut sims: Vec<(usize, f64)> = (0..n_users)
            .filter(|&v| v != u && norms[u] > 0.0 && norms[v] > 0.0)
            .map(|v| (v, centred.row(u).dot(&centred.row(v)) / (norms[u] * norms[v])))
            .collect();
        sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        sims.truncate(k);
        for i in 0..n_items {
            let (mut num, mut den) = (0.0, 0.0);
            for &(v, s) in &sims {
                if seen[(v, i)] {
                    num += s * centred[(v, i)];
                    den += s.abs();
                }
            }
            scores[(u, i)] = user_mean[u] + if den > 0.0 { num / den } else { 0.0 };
        }
    }
    scores
}

/// Predicted value of every cell, users × items.
pub fn score_matrix(
    kind: RecommenderKind,
    n_users: usize,
    n_items: usize,
    train: &[Observation],
    seed: u64,
) -> Result<DMatrix<f64>> {
    check(n_users, n_items, train)?;
    let mu = global_mean(train);
    Ok(match kind {
        RecommenderKind::Factorization { rank } => {
            if rank == 0 {
                return Err(Error::Config("factorization rank must be positive".into()));
            }
            factorization(n_users, n_items, train, rank, seed)
        }
        RecommenderKind::UserMean => {
            let m = axis_means(n_users, train, |o| o.0, mu);
            DMatrix::from_fn(n_users, n_items, |u, _| m[u])
        }
        RecommenderKind::ItemMean => {
            let m = axis_means(n_items, train, |o| o.1, mu);
            DMatrix::from_fn(n_users, n_items, |_, i| m[i])
        }
        RecommenderKind::GlobalMean | RecommenderKind::Uniform => DMatrix::from_element(n_users, n_items, mu),
        RecommenderKind::UserKnn { k } => {
            if k == 0 {
                return Err(Error::Config("neighbour count must be positive".into()));
            }
            user_knn(n_users, n_items, train, k)
        }
    })
}

/// Indices of the `n` highest scores in a row; ties are ordered by a seeded
/// random key so flat score rows give a random (but reproducible) pick.
fn top_n(scores: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut idx: Vec<(usize, u64)> = (0..scores.len()).map(|i| (i, rng.random())).collect();
    idx.sort_by(|a, b| scores[b.0].total_cmp(&scores[a.0]).then(a.1.cmp(&b.1)));
    idx.iter().take(n).map(|p| p.0 as u32).collect()
}

/// Train every recommender and wrap it as an ε-greedy top-`top_n` candidate.
/// Candidate params are the one-hot position of the model in `kinds`.
pub fn build_recommender_candidates(
    n_users: usize,
    n_items: usize,
    train: &[Observation],
    kinds: &[RecommenderKind],
    top_n_items: usize,
    epsilon: f64,
    seed: u64,
) -> Result<Vec<CandidateModel>> {
    if top_n_items == 0 || top_n_items > n_items {
        return Err(Error::Config(format!("top-n {top_n_items} must be in 1..={n_items}")));
    }
    kinds
        .iter()
        .enumerate()
        .map(|(pos, kind)| {
            let mut one_hot = vec![0.0; kinds.len()];
            one_hot[pos] = 1.0;
            let model = if *kind == RecommenderKind::Uniform {
                check(n_users, n_items, train)?;
                CandidateModel::uniform(kind.label(), n_items, n_users)
            } else {
                let scores = score_matrix(*kind, n_users, n_items, train, seed)?;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "recommender-ties", pos as u64));
                let proposals = (0..n_users)
                    .map(|u| top_n(&scores.row(u).iter().copied().collect::<Vec<_>>(), top_n_items, &mut rng))
                    .collect();
                CandidateModel::new(kind.label(), n_items, epsilon, proposals)?
            };
            Ok(model.with_params(one_hot))
        })
        .collect()
}
