//! Latent predictions: full covariance or the FITC diagonal-plus-low-rank form.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::SvgpPosterior;
use crate::error::{Error, Result};
use crate::linalg::{lower_triangular_inverse, symmetrize};

/// Rows of the query processed per block when building factors.
const BLOCK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictMode {
    /// `K** − Q** + K*u K_uu⁻¹ S_u K_uu⁻¹ Ku*`.
    Full,
    /// Same low-rank term, but only the diagonal of `K** − Q**` is kept.
    FitcDiag,
}

/// Predictive covariance in FITC form: `diag(residual) + factorᵀ factor`.
///
/// `factor` is `C × n`; the full-mode covariance differs only off the diagonal.
#[derive(Debug, Clone)]
pub struct LatentFactors {
    pub mean: DVector<f64>,
    pub residual: DVector<f64>,
    pub factor: DMatrix<f64>,
}

impl LatentFactors {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Marginal variances, identical in both modes.
    pub fn variances(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.factor
                .column_iter()
                .zip(self.residual.iter())
                .map(|(c, r)| r + c.norm_squared()),
        )
    }
}

impl SvgpPosterior {
    fn check_query(&self, xstar: &DMatrix<f64>) -> Result<()> {
        if xstar.nrows() > 0 && xstar.ncols() != self.kernel.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.kernel.dim(),
                got: xstar.ncols(),
            });
        }
        Ok(())
    }

    /// `A = L⁻¹ K_u*` for a block of query points.
    fn projection(&self, linv: &DMatrix<f64>, xstar: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(linv * self.kernel.kernel_matrix(&self.inducing, xstar)?)
    }

    /// Mean, FITC residual and low-rank factor for every query point.
    pub fn latent_factors(&self, xstar: &DMatrix<f64>) -> Result<LatentFactors> {
        self.check_query(xstar)?;
        let n = xstar.nrows();
        let c = self.num_inducing();
        let linv = lower_triangular_inverse(&self.kuu_cholesky()?.l());
        let mut mean = DVector::zeros(n);
        let mut residual = DVector::zeros(n);
        let mut factor = DMatrix::zeros(c, n);
        let mut start = 0;
        while start < n {
            let len = BLOCK.min(n - start);
            let a = self.projection(&linv, &xstar.rows(start, len).into_owned())?;
            mean.rows_mut(start, len).copy_from(&a.tr_mul(&self.q_mean));
            for (i, col) in a.column_iter().enumerate() {
                residual[start + i] = (self.kernel.variance - col.norm_squared()).max(0.0);
            }
            factor.columns_mut(start, len).copy_from(&(self.q_sqrt.transpose() * &a));
            start += len;
        }
        Ok(LatentFactors {
            mean,
            residual,
            factor,
        })
    }

    /// Predictive mean and dense covariance of the latent function.
    pub fn predict_latent(&self, xstar: &DMatrix<f64>, mode: PredictMode) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.check_query(xstar)?;
        if xstar.nrows() == 0 {
            return Ok((DVector::zeros(0), DMatrix::zeros(0, 0)));
        }
        let linv = lower_triangular_inverse(&self.kuu_cholesky()?.l());
        let a = self.projection(&linv, xstar)?;
        let mean = a.tr_mul(&self.q_mean);
        let f = self.q_sqrt.transpose() * &a;
        let low_rank = f.transpose() * &f;
        let mut cov = match mode {
            PredictMode::Full => self.kernel.kernel_matrix(xstar, xstar)? - a.transpose() * &a + low_rank,
            PredictMode::FitcDiag => {
                let mut c = low_rank;
                for (i, col) in a.column_iter().enumerate() {
                    c[(i, i)] += (self.kernel.variance - col.norm_squared()).max(0.0);
                }
                c
            }
        };
        symmetrize(&mut cov);
        for i in 0..cov.nrows() {
            if cov[(i, i)] < 0.0 {
                cov[(i, i)] = 0.0;
            }
        }
        Ok((mean, cov))
    }

    /// Predictive mean and marginal variance of the latent function.
    pub fn predict_marginals(&self, xstar: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let f = self.latent_factors(xstar)?;
        let v = f.variances();
        Ok((f.mean, v))
    }
}
