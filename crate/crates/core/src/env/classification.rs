//! Multi-class classification run as a contextual bandit: the decision is a
//! predicted label and the feedback is whether it was correct.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::LabelledData;
use super::{check_compatible, recorded, sample_decision, Deployment, Environment, Interaction};
use crate::encoding::{Encoding, PointEncoder};
use crate::error::{Error, Result};
use crate::kernels::KernelFamily;
use crate::policy::CandidateModel;
use crate::seeds::derive_seed;

/// A disjoint split into candidate-training rows and the hold-out pool.
#[derive(Debug, Clone)]
pub struct ClassificationSetup {
    pub train_features: DMatrix<f64>,
    pub train_labels: Vec<u32>,
    pub pool_features: DMatrix<f64>,
    pub pool_labels: Vec<u32>,
    pub n_classes: usize,
}

impl ClassificationSetup {
    /// Random disjoint subsets of `n_train` and `pool_size` rows.
    pub fn split(data: &LabelledData, n_train: usize, pool_size: usize, seed: u64) -> Result<Self> {
        let n = data.labels.len();
        if n_train + pool_size > n {
            return Err(Error::Data(format!(
                "need {} rows, dataset has {n}",
                n_train + pool_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = sample(&mut rng, n, n_train + pool_size).into_vec();
        let (train, pool) = idx.split_at(n_train);
        Ok(Self {
            train_features: data.features.select_rows(train.iter()),
            train_labels: train.iter().map(|&i| data.labels[i]).collect(),
            pool_features: data.features.select_rows(pool.iter()),
            pool_labels: pool.iter().map(|&i| data.labels[i]).collect(),
            n_classes: data.n_classes,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ClassificationEnv {
    labels: Vec<u32>,
    n_classes: usize,
    sample_size: usize,
    seed: u64,
    /// Standardized pool features used as surrogate inputs.
    surrogate_features: DMatrix<f64>,
}

impl ClassificationEnv {
    pub fn new(pool_features: &DMatrix<f64>, labels: Vec<u32>, n_classes: usize, sample_size: usize, seed: u64) -> Result<Self> {
        if pool_features.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: labels.len(),
                got: pool_features.nrows(),
            });
        }
        if sample_size == 0 || sample_size > labels.len() {
            return Err(Error::Config(format!(
                "sample size {sample_size} must be in 1..={}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(Error::Data(format!("label {bad} outside {n_classes} classes")));
        }
        Ok(Self {
            surrogate_features: standardize(pool_features),
            labels,
            n_classes,
            sample_size,
            seed,
        })
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Zero-mean, unit-variance columns; constant columns are only centered.
pub fn standardize(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let mut out = x.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        col.apply(|v| *v = (*v - mean) / sd);
    }
    out
}

impl Environment for ClassificationEnv {
    fn n_inputs(&self) -> usize {
        self.labels.len()
    }

    fn n_decisions(&self) -> usize {
        self.n_classes
    }

    fn expected_feedback(&self, input: usize, decision: usize) -> f64 {
        if self.labels[input] as usize == decision {
            1.0
        } else {
            0.0
        }
    }

    fn deploy(&self, model: &CandidateModel, iteration: u64) -> Result<Deployment> {
        check_compatible(self, model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "classification-deploy", iteration));
        let inputs = sample(&mut rng, self.labels.len(), self.sample_size).into_vec();
        let interactions: Vec<Interaction> = inputs
            .into_iter()
            .map(|x| {
                let (a, p) = sample_decision(model, x, &mut rng);
                Interaction {
                    feedback: self.expected_feedback(x, a),
                    decision: a,
                    input: x,
                    propensity: p,
                }
            })
            .collect();
        Ok(Deployment {
            recorded_metric: recorded(&interactions),
            interactions,
        })
    }

    fn surrogate_encoder(&self, _rng: &mut dyn rand::RngCore) -> Result<PointEncoder> {
        Ok(PointEncoder::new(
            Encoding::Features(self.surrogate_features.clone()),
            Encoding::one_hot(self.n_classes),
        ))
    }

    fn surrogate_kernel(&self) -> KernelFamily {
        KernelFamily::Matern32
    }

    fn reward_features(&self) -> Option<&DMatrix<f64>> {
        Some(&self.surrogate_features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(n: usize, k: usize, sample_size: usize) -> ClassificationEnv {
        let x = DMatrix::from_fn(n, 2, |i, j| (i * (j + 1)) as f64);
        let labels = (0..n).map(|i| (i % k) as u32).collect();
        ClassificationEnv::new(&x, labels, k, sample_size, 3).unwrap()
    }

    fn oracle(e: &ClassificationEnv, eps: f64) -> CandidateModel {
        CandidateModel::new("oracle", e.n_classes, eps, e.labels.iter().map(|&l| vec![l]).collect()).unwrap()
    }

    #[test]
    fn oracle_without_exploration_is_perfect() {
        let e = env(50, 4, 20);
        let d = e.deploy(&oracle(&e, 0.0), 0).unwrap();
        assert_eq!(d.recorded_metric, 1.0);
        assert_eq!(e.true_metric(&oracle(&e, 0.0)).unwrap(), 1.0);
    }

    #[test]
    fn oracle_with_exploration_averages_to_one_minus_epsilon() {
        let e = env(10_000, 26, 10_000);
        let m = oracle(&e, 0.05);
        assert!((e.true_metric(&m).unwrap() - 0.95).abs() < 1e-12);
        let d = e.deploy(&m, 1).unwrap();
        let se = (0.95f64 * 0.05 / 10_000.0).sqrt();
        assert!((d.recorded_metric - 0.95).abs() < 3.0 * se);
    }

    #[test]
    fn deploy_is_reproducible_and_without_replacement() {
        let e = env(100, 3, 60);
        let m = CandidateModel::uniform("u", 3, 100);
        let a = e.deploy(&m, 5).unwrap();
        assert_eq!(a, e.deploy(&m, 5).unwrap());
        assert_ne!(a, e.deploy(&m, 6).unwrap());
        let mut inputs: Vec<usize> = a.interactions.iter().map(|i| i.input).collect();
        inputs.sort();
        inputs.dedup();
        assert_eq!(inputs.len(), 60);
    }

    #[test]
    fn incompatible_model_rejected() {
        let e = env(10, 3, 5);
        assert!(e.deploy(&CandidateModel::uniform("u", 4, 10), 0).is_err());
        assert!(e.true_metric(&CandidateModel::uniform("u", 3, 9)).is_err());
    }

    #[test]
    fn bad_construction_rejected() {
        let x = DMatrix::zeros(3, 1);
        assert!(ClassificationEnv::new(&x, vec![0, 1, 2], 3, 4, 0).is_err());
        assert!(ClassificationEnv::new(&x, vec![0, 1, 5], 3, 2, 0).is_err());
    }
}
