//! Gauss–Hermite quadrature for one-dimensional Gaussian expectations.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nodes and weights for `∫ exp(-t²) g(t) dt ≈ Σ w_k g(t_k)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Golub–Welsch: nodes are the eigenvalues of the symmetric Jacobi matrix of
    /// the Hermite recurrence, weights are `√π` times the squared first
    /// eigenvector components.
    pub fn new(order: usize) -> Result<Self> {
        if order < 2 {
            return Err(Error::InvalidArgument(format!(
                "quadrature order must be >= 2, got {order}"
            )));
        }
        let mut jacobi = DMatrix::<f64>::zeros(order, order);
        for k in 1..order {
            let b = (k as f64 / 2.0).sqrt();
            jacobi[(k, k - 1)] = b;
            jacobi[(k - 1, k)] = b;
        }
        let eig = SymmetricEigen::new(jacobi);
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let mut pairs: Vec<(f64, f64)> = (0..order)
            .map(|i| {
                let v0 = eig.eigenvectors[(0, i)];
                (eig.eigenvalues[i], sqrt_pi * v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Symmetrize to remove eigen-solver round-off.
        let n = pairs.len();
        for i in 0..n / 2 {
            let t = 0.5 * (pairs[n - 1 - i].0 - pairs[i].0);
            let w = 0.5 * (pairs[n - 1 - i].1 + pairs[i].1);
            pairs[i] = (-t, w);
            pairs[n - 1 - i] = (t, w);
        }
        if n % 2 == 1 {
            pairs[n / 2].0 = 0.0;
        }
        Ok(Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        })
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// `E[g(f)]` for `f ~ N(mean, var)`.
    pub fn expectation(&self, mean: f64, var: f64, g: impl Fn(f64) -> f64) -> f64 {
        let scale = (2.0 * var.max(0.0)).sqrt();
        let norm = std::f64::consts::PI.sqrt();
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(t, w)| w * g(mean + scale * t))
            .sum::<f64>()
            / norm
    }
}
