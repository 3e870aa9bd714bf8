//! Candidate decision distributions, the evaluation grid and policy matrices.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column sums of a policy matrix must be within this of one.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// A candidate model as an ε-greedy decision rule: at each input the model
/// proposes a set of decisions, which share `1 − ε` uniformly, while the
/// remaining decisions share `ε`. Proposing every decision is uniform random.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateModel {
    pub name: String,
    pub n_decisions: usize,
    pub epsilon: f64,
    /// Proposed decisions per input id.
    pub proposals: Vec<Vec<u32>>,
    /// Coordinates in the model's own parameter space (used by BO).
    pub params: Vec<f64>,
}

impl CandidateModel {
    pub fn new(name: impl Into<String>, n_decisions: usize, epsilon: f64, proposals: Vec<Vec<u32>>) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::InvalidArgument(format!("epsilon {epsilon} outside [0, 1]")));
        }
        for (x, p) in proposals.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::InvalidArgument(format!("no proposal for input {x}")));
            }
            if p.iter().any(|&a| a as usize >= n_decisions) {
                return Err(Error::UnknownId {
                    vocabulary: "decision".into(),
                    id: *p.iter().max().expect("non-empty") as usize,
                });
            }
            let mut sorted = p.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != p.len() {
                return Err(Error::InvalidArgument(format!("duplicate proposal at input {x}")));
            }
        }
        Ok(Self {
            name: name.into(),
            n_decisions,
            epsilon,
            proposals,
            params: Vec::new(),
        })
    }

    /// Uniformly random decisions.
    pub fn uniform(name: impl Into<String>, n_decisions: usize, n_inputs: usize) -> Self {
        let all: Vec<u32> = (0..n_decisions as u32).collect();
        Self {
            name: name.into(),
            n_decisions,
            epsilon: 0.0,
            proposals: vec![all; n_inputs],
            params: Vec::new(),
        }
    }

    pub fn with_params(mut self, params: Vec<f64>) -> Self {
        self.params = params;
        self
    }

    pub fn n_inputs(&self) -> usize {
        self.proposals.len()
    }

    /// `(probability of each proposed decision, probability of every other decision)`.
    pub fn masses(&self, input: usize) -> (f64, f64) {
        let s = self.proposals[input].len();
        let k = self.n_decisions;
        if s == k {
            (1.0 / k as f64, 0.0)
        } else {
            ((1.0 - self.epsilon) / s as f64, self.epsilon / (k - s) as f64)
        }
    }

    pub fn prob(&self, input: usize, decision: usize) -> f64 {
        let (on, off) = self.masses(input);
        if self.proposals[input].contains(&(decision as u32)) {
            on
        } else {
            off
        }
    }

    /// Full decision distribution at `input`.
    pub fn distribution(&self, input: usize) -> Vec<f64> {
        let (on, off) = self.masses(input);
        let mut d = vec![off; self.n_decisions];
        for &a in &self.proposals[input] {
            d[a as usize] = on;
        }
        d
    }
}

/// All `(decision, input)` combinations, flattened with the decision index
/// varying fastest: position `a + t·K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub inputs: Vec<usize>,
    pub n_decisions: usize,
}

impl EvalGrid {
    pub fn new(inputs: Vec<usize>, n_decisions: usize) -> Self {
        Self { inputs, n_decisions }
    }

    /// Grid over input ids `0..n_inputs`.
    pub fn full(n_inputs: usize, n_decisions: usize) -> Self {
        Self::new((0..n_inputs).collect(), n_decisions)
    }

    pub fn n_inputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn len(&self) -> usize {
        self.inputs.len() * self.n_decisions
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, decision: usize, column: usize) -> usize {
        decision + column * self.n_decisions
    }

    /// `(input id, decision id)` pairs in grid order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.len());
        for &x in &self.inputs {
            for a in 0..self.n_decisions {
                out.push((x, a));
            }
        }
        out
    }
}

/// `K × T` matrix of decision probabilities; entry `(a, t)` is `p(a | x_t)`.
/// Its column-major storage is the flattened vector aligned with the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyMatrix(DMatrix<f64>);

impl PolicyMatrix {
    pub fn from_matrix(p: DMatrix<f64>) -> Result<Self> {
        for (t, col) in p.column_iter().enumerate() {
            let sum = col.sum();
            if (sum - 1.0).abs() > NORMALIZATION_TOL || col.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::NotNormalized { column: t, sum });
            }
        }
        Ok(Self(p))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// Flattened `P_:` in grid order.
    pub fn flat(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn n_decisions(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.0.ncols()
    }
}

pub fn policy_matrix(model: &CandidateModel, grid: &EvalGrid) -> Result<PolicyMatrix> {
    if model.n_decisions != grid.n_decisions {
        return Err(Error::Incompatible(format!(
            "model has {} decisions, grid has {}",
            model.n_decisions, grid.n_decisions
        )));
    }
    let mut p = DMatrix::zeros(grid.n_decisions, grid.n_inputs());
    for (t, &x) in grid.inputs.iter().enumerate() {
        if x >= model.n_inputs() {
            return Err(Error::UnknownId {
                vocabulary: "input".into(),
                id: x,
            });
        }
        for (a, v) in model.distribution(x).into_iter().enumerate() {
            p[(a, t)] = v;
        }
    }
    PolicyMatrix::from_matrix(p)
}

/// A policy matrix as a per-column floor plus sparse extra mass, so that
/// contractions cost `O(T · extras)` instead of `O(K · T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactPolicy {
    pub n_decisions: usize,
    pub floor: Vec<f64>,
    /// `(grid index, mass above the floor)`.
    pub extras: Vec<(usize, f64)>,
}

impl CompactPolicy {
    pub fn from_policy(p: &PolicyMatrix) -> Self {
        let k = p.n_decisions();
        let mut floor = Vec::with_capacity(p.n_inputs());
        let mut extras = Vec::new();
        for (t, col) in p.matrix().column_iter().enumerate() {
            let f = col.min();
            floor.push(f);
            for (a, v) in col.iter().enumerate() {
                if *v > f {
                    extras.push((a + t * k, v - f));
                }
            }
        }
        Self {
            n_decisions: k,
            floor,
            extras,
        }
    }

    pub fn from_model(model: &CandidateModel, grid: &EvalGrid) -> Result<Self> {
        Ok(Self::from_policy(&policy_matrix(model, grid)?))
    }

    /// `Σ_w p_w v_w`, given the per-column sums of `v`.
    pub fn contract(&self, values: &[f64], column_sums: &[f64]) -> f64 {
        let base: f64 = self.floor.iter().zip(column_sums).map(|(f, s)| f * s).sum();
        base + self.extras.iter().map(|&(i, e)| e * values[i]).sum::<f64>()
    }

    /// `Σ_w p_w² v_w`, given the per-column sums of `v`.
    pub fn contract_squared(&self, values: &[f64], column_sums: &[f64]) -> f64 {
        let base: f64 = self.floor.iter().zip(column_sums).map(|(f, s)| f * f * s).sum();
        let k = self.n_decisions;
        base + self
            .extras
            .iter()
            .map(|&(i, e)| {
                let f = self.floor[i / k];
                ((f + e).powi(2) - f * f) * values[i]
            })
            .sum::<f64>()
    }
}

/// Per-column sums of a grid-ordered vector.
pub fn column_sums(values: &[f64], n_decisions: usize) -> Vec<f64> {
    values.chunks(n_decisions).map(|c| c.iter().sum()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn uniform_model_entries() {
        let m = CandidateModel::uniform("u", 4, 3);
        let p = policy_matrix(&m, &EvalGrid::full(3, 4)).unwrap();
        assert!(p.flat().iter().all(|v| *v == 0.25));
    }

    #[test]
    fn deterministic_model_with_exploration() {
        let m = CandidateModel::new("d", 5, 0.05, vec![vec![1]]).unwrap();
        let d = m.distribution(0);
        let expected = [0.0125, 0.95, 0.0125, 0.0125, 0.0125];
        for (a, b) in d.iter().zip(expected) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn top_five_share() {
        let m = CandidateModel::new("r", 20, 0.05, vec![vec![0, 3, 5, 7, 9]]).unwrap();
        let d = m.distribution(0);
        assert_relative_eq!(d[3], 0.19, epsilon = 1e-15);
        assert_relative_eq!(d[1], 0.05 / 15.0, epsilon = 1e-15);
    }

    #[test]
    fn grid_order_is_decision_major_within_input() {
        let g = EvalGrid::full(2, 3);
        assert_eq!(g.pairs(), vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]);
        assert_eq!(g.index(2, 1), 5);
    }

    #[test]
    fn unnormalized_matrix_rejected() {
        let p = DMatrix::from_row_slice(2, 1, &[0.5, 0.6]);
        assert!(matches!(PolicyMatrix::from_matrix(p), Err(Error::NotNormalized { .. })));
    }

    #[test]
    fn invalid_models_rejected() {
        assert!(CandidateModel::new("x", 3, 0.1, vec![vec![3]]).is_err());
        assert!(CandidateModel::new("x", 3, 1.5, vec![vec![0]]).is_err());
        assert!(CandidateModel::new("x", 3, 0.1, vec![vec![]]).is_err());
        let m = CandidateModel::new("x", 3, 0.1, vec![vec![0]]).unwrap();
        assert!(policy_matrix(&m, &EvalGrid::full(2, 3)).is_err());
        assert!(policy_matrix(&m, &EvalGrid::full(1, 4)).is_err());
    }

    proptest! {
        #[test]
        fn columns_normalized_and_compact_form_exact(
            k in 2usize..8,
            eps in 0.0f64..1.0,
            seeds in proptest::collection::vec(0u32..1000, 1..6),
            values in proptest::collection::vec(0.0f64..1.0, 48),
        ) {
            let proposals: Vec<Vec<u32>> = seeds
                .iter()
                .map(|s| {
                    let n = 1 + (*s as usize % k);
                    (0..n as u32).map(|j| (j + s) % k as u32).collect()
                })
                .collect();
            let t = proposals.len();
            let m = CandidateModel::new("p", k, eps, proposals).unwrap();
            let grid = EvalGrid::full(t, k);
            let p = policy_matrix(&m, &grid).unwrap();
            for col in p.matrix().column_iter() {
                prop_assert!((col.sum() - 1.0).abs() < 1e-9);
            }
            let v = &values[..k * t];
            let sums = column_sums(v, k);
            let dense: f64 = p.flat().iter().zip(v).map(|(a, b)| a * b).sum();
            let dense2: f64 = p.flat().iter().zip(v).map(|(a, b)| a * a * b).sum();
            let c = CompactPolicy::from_policy(&p);
            prop_assert!((c.contract(v, &sums) - dense).abs() < 1e-12);
            prop_assert!((c.contract_squared(v, &sums) - dense2).abs() < 1e-12);
        }
    }
}
