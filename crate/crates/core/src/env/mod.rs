//! Simulated online systems with known ground truth.

mod classification;
pub mod data;
mod recsys;

pub use classification::{ClassificationEnv, ClassificationSetup};
pub use recsys::{build_recsys_env, prob_to_rating, rating_to_prob, RecsysConfig, RecsysEnv, TableEntry, ThresholdScale, RATING_LEVELS};

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::PointEncoder;
use crate::error::{Error, Result};
use crate::kernels::KernelFamily;
use crate::policy::CandidateModel;

/// One logged interaction `(m, a, x)` plus the probability with which the
/// deployed model chose `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub feedback: f64,
    pub decision: usize,
    pub input: usize,
    pub propensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deployment {
    pub interactions: Vec<Interaction>,
    /// Mean feedback over the deployment.
    pub recorded_metric: f64,
}

pub trait Environment: Send + Sync {
    /// Number of evaluation inputs (the empirical input distribution).
    fn n_inputs(&self) -> usize;
    fn n_decisions(&self) -> usize;
    /// `E[m | a, x]`.
    fn expected_feedback(&self, input: usize, decision: usize) -> f64;
    /// Run the model online; reproducible given the environment seed and `iteration`.
    fn deploy(&self, model: &CandidateModel, iteration: u64) -> Result<Deployment>;
    /// Surrogate input map for `(input, decision)` pairs; embeddings are drawn from `rng`.
    fn surrogate_encoder(&self, rng: &mut dyn rand::RngCore) -> Result<PointEncoder>;
    fn surrogate_kernel(&self) -> KernelFamily;
    /// Per-input features for a parametric reward model; `None` means inputs are bare ids.
    fn reward_features(&self) -> Option<&DMatrix<f64>> {
        None
    }

    /// `(1/T) Σ_x Σ_a p(a|x) E[m|a,x]` over every evaluation input.
    fn true_metric(&self, model: &CandidateModel) -> Result<f64> {
        check_compatible(self, model)?;
        let t = self.n_inputs();
        let k = self.n_decisions();
        let mut total = 0.0;
        for x in 0..t {
            let (on, off) = model.masses(x);
            let mut all = 0.0;
            let mut proposed = 0.0;
            for a in 0..k {
                all += self.expected_feedback(x, a);
            }
            for &a in &model.proposals[x] {
                proposed += self.expected_feedback(x, a as usize);
            }
            total += off * (all - proposed) + on * proposed;
        }
        Ok(total / t as f64)
    }
}

pub(crate) fn check_compatible<E: Environment + ?Sized>(env: &E, model: &CandidateModel) -> Result<()> {
    if model.n_decisions != env.n_decisions() || model.n_inputs() != env.n_inputs() {
        return Err(Error::Incompatible(format!(
            "model `{}` covers {} inputs x {} decisions, environment has {} x {}",
            model.name,
            model.n_inputs(),
            model.n_decisions,
            env.n_inputs(),
            env.n_decisions()
        )));
    }
    Ok(())
}

/// Draw a decision from the model's distribution at `input`.
pub(crate) fn sample_decision<R: Rng + ?Sized>(model: &CandidateModel, input: usize, rng: &mut R) -> (usize, f64) {
    let dist = model.distribution(input);
    let mut u: f64 = rng.random();
    for (a, p) in dist.iter().enumerate() {
        if u < *p {
            return (a, *p);
        }
        u -= p;
    }
    // Round-off: fall back to the last decision with positive mass.
    let a = dist.iter().rposition(|p| *p > 0.0).expect("normalized distribution");
    (a, dist[a])
}

pub(crate) fn recorded(interactions: &[Interaction]) -> f64 {
    interactions.iter().map(|i| i.feedback).sum::<f64>() / interactions.len().max(1) as f64
}
