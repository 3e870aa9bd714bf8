//! Rating-table recommender simulator: users are inputs, items are decisions,
//! feedback is a Bernoulli draw with a rating-derived response probability.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Rating;
use super::{check_compatible, recorded, sample_decision, Deployment, Environment, Interaction};
use crate::encoding::{Encoding, PointEncoder};
use crate::error::{Error, Result};
use crate::kernels::{EmbeddingTable, KernelFamily};
use crate::policy::CandidateModel;
use crate::seeds::derive_seed;

/// Response probability for ratings 0 (or missing) through 5.
pub const RATING_LEVELS: [f64; 6] = [0.05, 0.23, 0.41, 0.59, 0.77, 0.95];

pub fn rating_to_prob(rating: u8) -> f64 {
    RATING_LEVELS[rating.min(5) as usize]
}

/// Inverse of [`rating_to_prob`] for the six levels.
pub fn prob_to_rating(q: f64) -> Option<u8> {
    RATING_LEVELS
        .iter()
        .position(|l| (l - q).abs() < 1e-12)
        .map(|p| p as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdScale {
    /// Mean raw rating with missing entries counted as 0.
    Raw,
    /// Mean response probability after the rating map.
    Probability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecsysConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub train_fraction: f64,
    pub item_threshold: f64,
    pub threshold_scale: ThresholdScale,
    pub rounds_per_user: usize,
    pub embed_dim: usize,
}

impl Default for RecsysConfig {
    fn default() -> Self {
        Self {
            n_users: 100,
            n_items: 100,
            train_fraction: 0.2,
            item_threshold: 0.2,
            threshold_scale: ThresholdScale::Raw,
            rounds_per_user: 5,
            embed_dim: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RecsysEnv {
    /// Response probabilities, users × items.
    pub table: DMatrix<f64>,
    pub user_ids: Vec<u32>,
    pub item_ids: Vec<u32>,
    rounds_per_user: usize,
    embed_dim: usize,
    seed: u64,
}

/// A training cell of the response table: `(user row, item column, probability)`.
pub type TableEntry = (usize, usize, f64);

impl RecsysEnv {
    pub fn from_table(table: DMatrix<f64>, rounds_per_user: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        if table.iter().any(|q| !(0.05..=0.95).contains(q)) {
            return Err(Error::Data("response probabilities must lie in [0.05, 0.95]".into()));
        }
        if rounds_per_user == 0 || table.is_empty() {
            return Err(Error::Config("recommender table and rounds must be non-empty".into()));
        }
        Ok(Self {
            user_ids: (0..table.nrows() as u32).collect(),
            item_ids: (0..table.ncols() as u32).collect(),
            table,
            rounds_per_user,
            embed_dim,
            seed,
        })
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Select users and items, build the response table and reserve a random
/// fraction of its cells for training candidate models.
pub fn build_recsys_env(ratings: &[Rating], cfg: &RecsysConfig, seed: u64) -> Result<(RecsysEnv, Vec<TableEntry>)> {
    if ratings.is_empty() {
        return Err(Error::Data("no ratings".into()));
    }
    if !(0.0..=1.0).contains(&cfg.train_fraction) {
        return Err(Error::Config("train fraction must be in [0, 1]".into()));
    }
    let mut user_counts: HashMap<u32, usize> = HashMap::new();
    for r in ratings {
        *user_counts.entry(r.user).or_default() += 1;
    }
    let mut users: Vec<(u32, usize)> = user_counts.into_iter().collect();
    users.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    users.truncate(cfg.n_users);
    let mut user_ids: Vec<u32> = users.iter().map(|u| u.0).collect();
    user_ids.sort_unstable();
    let user_row: HashMap<u32, usize> = user_ids.iter().enumerate().map(|(i, u)| (*u, i)).collect();

    let mut by_item: HashMap<u32, Vec<(usize, u8)>> = HashMap::new();
    for r in ratings {
        if let Some(&row) = user_row.get(&r.user) {
            by_item.entry(r.item).or_default().push((row, r.rating));
        }
    }
    let n_users = user_ids.len() as f64;
    let mut items: Vec<(u32, usize)> = by_item
        .iter()
        .filter(|(_, rs)| {
            let mean = match cfg.threshold_scale {
                ThresholdScale::Raw => rs.iter().map(|r| r.1 as f64).sum::<f64>() / n_users,
                ThresholdScale::Probability => {
                    let rated: f64 = rs.iter().map(|r| rating_to_prob(r.1)).sum();
                    (rated + (n_users - rs.len() as f64) * RATING_LEVELS[0]) / n_users
                }
            };
            mean >= cfg.item_threshold
        })
        .map(|(id, rs)| (*id, rs.len()))
        .collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    items.truncate(cfg.n_items);
    let mut item_ids: Vec<u32> = items.iter().map(|i| i.0).collect();
    item_ids.sort_unstable();
    if item_ids.is_empty() {
        return Err(Error::Data("no items pass the rating threshold".into()));
    }

    let mut table = DMatrix::from_element(user_ids.len(), item_ids.len(), RATING_LEVELS[0]);
    for (col, id) in item_ids.iter().enumerate() {
        for &(row, rating) in &by_item[id] {
            table[(row, col)] = rating_to_prob(rating);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "recsys-split", 0));
    let mut cells: Vec<(usize, usize)> = (0..table.ncols())
        .flat_map(|j| (0..table.nrows()).map(move |i| (i, j)))
        .collect();
    cells.shuffle(&mut rng);
    let n_train = (cfg.train_fraction * cells.len() as f64).round() as usize;
    let train = cells[..n_train].iter().map(|&(i, j)| (i, j, table[(i, j)])).collect();

    let mut env = RecsysEnv::from_table(table, cfg.rounds_per_user, cfg.embed_dim, seed)?;
    env.user_ids = user_ids;
    env.item_ids = item_ids;
    Ok((env, train))
}

impl Environment for RecsysEnv {
    fn n_inputs(&self) -> usize {
        self.table.nrows()
    }

    fn n_decisions(&self) -> usize {
        self.table.ncols()
    }

    fn expected_feedback(&self, input: usize, decision: usize) -> f64 {
        self.table[(input, decision)]
    }

    fn deploy(&self, model: &CandidateModel, iteration: u64) -> Result<Deployment> {
        check_compatible(self, model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "recsys-deploy", iteration));
        let mut interactions = Vec::with_capacity(self.n_inputs() * self.rounds_per_user);
        for user in 0..self.n_inputs() {
            for _ in 0..self.rounds_per_user {
                let (a, p) = sample_decision(model, user, &mut rng);
                let hit = rng.random::<f64>() < self.table[(user, a)];
                interactions.push(Interaction {
                    feedback: if hit { 1.0 } else { 0.0 },
                    decision: a,
                    input: user,
                    propensity: p,
                });
            }
        }
        Ok(Deployment {
            recorded_metric: recorded(&interactions),
            interactions,
        })
    }

    fn surrogate_encoder(&self, rng: &mut dyn rand::RngCore) -> Result<PointEncoder> {
        let users = EmbeddingTable::standard_normal("user", (0..self.n_inputs()).collect(), self.embed_dim, rng)?;
        let items = EmbeddingTable::standard_normal("item", (0..self.n_decisions()).collect(), self.embed_dim, rng)?;
        Ok(PointEncoder::new(Encoding::Embedding(users), Encoding::Embedding(items)))
    }

    fn surrogate_kernel(&self) -> KernelFamily {
        KernelFamily::Rbf
    }
}
