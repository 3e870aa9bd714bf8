//! Maps `(input id, decision id)` pairs to surrogate kernel inputs.
//!
//! Each side is either a fixed feature table (one row per id) or a trainable
//! [`EmbeddingTable`]. A point is the input part followed by the decision part.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::EmbeddingTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Encoding {
    /// Fixed features; row `id` holds the coordinates of `id`.
    Features(#[serde(with = "crate::serial::b64_matrix")] DMatrix<f64>),
    /// Trainable latent coordinates.
    Embedding(EmbeddingTable),
}

impl Encoding {
    pub fn dim(&self) -> usize {
        match self {
            Encoding::Features(f) => f.ncols(),
            Encoding::Embedding(t) => t.dim(),
        }
    }

    pub fn one_hot(n: usize) -> Self {
        Encoding::Features(DMatrix::identity(n, n))
    }

    fn row(&self, id: usize, vocabulary: &str) -> Result<usize> {
        match self {
            Encoding::Features(f) => {
                if id < f.nrows() {
                    Ok(id)
                } else {
                    Err(Error::UnknownId {
                        vocabulary: vocabulary.to_string(),
                        id,
                    })
                }
            }
            Encoding::Embedding(t) => t.row(id),
        }
    }

    fn coords(&self) -> &DMatrix<f64> {
        match self {
            Encoding::Features(f) => f,
            Encoding::Embedding(t) => &t.coords,
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, Encoding::Embedding(_))
    }

    pub fn n_trainable(&self) -> usize {
        match self {
            Encoding::Features(_) => 0,
            Encoding::Embedding(t) => t.coords.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointEncoder {
    pub input: Encoding,
    pub decision: Encoding,
}

/// Gradient with respect to the trainable tables, same shapes as their coordinates.
#[derive(Debug, Clone, Default)]
pub struct EncoderGrad {
    pub input: Option<DMatrix<f64>>,
    pub decision: Option<DMatrix<f64>>,
}

impl PointEncoder {
    pub fn new(input: Encoding, decision: Encoding) -> Self {
        Self { input, decision }
    }

    pub fn dim(&self) -> usize {
        self.input.dim() + self.decision.dim()
    }

    /// Encode `(input, decision)` pairs; one row per pair.
    pub fn encode(&self, pairs: &[(usize, usize)]) -> Result<DMatrix<f64>> {
        let (di, dd) = (self.input.dim(), self.decision.dim());
        let (ci, cd) = (self.input.coords(), self.decision.coords());
        let mut out = DMatrix::<f64>::zeros(pairs.len(), di + dd);
        for (r, &(x, a)) in pairs.iter().enumerate() {
            let xr = self.input.row(x, "input")?;
            let ar = self.decision.row(a, "decision")?;
            for d in 0..di {
                out[(r, d)] = ci[(xr, d)];
            }
            for d in 0..dd {
                out[(r, di + d)] = cd[(ar, d)];
            }
        }
        Ok(out)
    }

    /// Accumulate point gradients into the trainable tables.
    pub fn scatter_grad(&self, pairs: &[(usize, usize)], point_grad: &DMatrix<f64>) -> Result<EncoderGrad> {
        let di = self.input.dim();
        let mut grad = EncoderGrad {
            input: self
                .input
                .is_trainable()
                .then(|| DMatrix::zeros(self.input.coords().nrows(), di)),
            decision: self
                .decision
                .is_trainable()
                .then(|| DMatrix::zeros(self.decision.coords().nrows(), self.decision.dim())),
        };
        for (r, &(x, a)) in pairs.iter().enumerate() {
            if let Some(g) = grad.input.as_mut() {
                let row = self.input.row(x, "input")?;
                for d in 0..di {
                    g[(row, d)] += point_grad[(r, d)];
                }
            }
            if let Some(g) = grad.decision.as_mut() {
                let row = self.decision.row(a, "decision")?;
                for d in 0..g.ncols() {
                    g[(row, d)] += point_grad[(r, di + d)];
                }
            }
        }
        Ok(grad)
    }

    /// Trainable coordinates in a fixed order: input table then decision table.
    pub fn trainable_params(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for enc in [&self.input, &self.decision] {
            if let Encoding::Embedding(t) = enc {
                v.extend(t.coords.iter());
            }
        }
        v
    }

    pub fn n_trainable(&self) -> usize {
        self.input.n_trainable() + self.decision.n_trainable()
    }

    pub fn set_trainable_params(&mut self, params: &[f64]) {
        let mut off = 0;
        for enc in [&mut self.input, &mut self.decision] {
            if let Encoding::Embedding(t) = enc {
                let n = t.coords.len();
                t.coords.as_mut_slice().copy_from_slice(&params[off..off + n]);
                off += n;
            }
        }
    }

    /// Restore lookup indices after deserialization.
    pub fn rebuild_indices(&mut self) -> Result<()> {
        for enc in [&mut self.input, &mut self.decision] {
            if let Encoding::Embedding(t) = enc {
                t.rebuild_index()?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_and_scatter() {
        let feats = DMatrix::from_row_slice(2, 1, &[10.0, 20.0]);
        let emb = EmbeddingTable::from_coords(
            "dec",
            vec![5, 9],
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
        )
        .unwrap();
        let enc = PointEncoder::new(Encoding::Features(feats), Encoding::Embedding(emb));
        let pts = enc.encode(&[(1, 9), (0, 5)]).unwrap();
        assert_eq!(pts.row(0).iter().copied().collect::<Vec<_>>(), vec![20.0, 3.0, 4.0]);
        assert_eq!(pts.row(1).iter().copied().collect::<Vec<_>>(), vec![10.0, 1.0, 2.0]);
        let g = enc
            .scatter_grad(&[(1, 9), (0, 9)], &DMatrix::from_element(2, 3, 1.0))
            .unwrap();
        assert!(g.input.is_none());
        let gd = g.decision.unwrap();
        assert_eq!(gd[(1, 0)], 2.0);
        assert_eq!(gd[(0, 0)], 0.0);
        assert!(enc.encode(&[(2, 5)]).is_err());
        assert!(enc.encode(&[(0, 6)]).is_err());
    }

    #[test]
    fn trainable_round_trip() {
        let emb = EmbeddingTable::from_coords("d", vec![0, 1], DMatrix::zeros(2, 2)).unwrap();
        let mut enc = PointEncoder::new(Encoding::one_hot(3), Encoding::Embedding(emb));
        assert_eq!(enc.n_trainable(), 4);
        enc.set_trainable_params(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(enc.trainable_params(), vec![1.0, 2.0, 3.0, 4.0]);
    }
}
