//! Sparse variational GP surrogate with Gaussian or Bernoulli (logistic)
//! likelihood.
//!
//! `q(u)` is stored whitened: `u = L v` with `K_uu = L Lᵀ` and
//! `q(v) = N(q_mean, q_sqrt q_sqrtᵀ)`, so the prior is `q_mean = 0`,
//! `q_sqrt = I`.

mod elbo;
mod predict;
mod train;

pub use elbo::{elbo, elbo_full, elbo_gradient, ElboParts, SvgpGrad};
pub use predict::{LatentFactors, PredictMode};
pub use train::{train_svgp, TrainConfig, TrainReport};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::PointEncoder;
use crate::error::{Error, Result};
use crate::kernels::KernelParams;
use crate::linalg::jittered_cholesky;

const FORMAT_NAME: &str = "svgp-posterior";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Likelihood {
    Gaussian { noise_var: f64 },
    /// `p(m = 1 | f) = σ(f)` with the logistic link.
    Bernoulli,
}

/// Training inputs: raw points, or `(input, decision)` id pairs resolved
/// through the posterior's encoder.
#[derive(Debug, Clone)]
pub enum SvgpInputs {
    Points(DMatrix<f64>),
    Pairs(Vec<(usize, usize)>),
}

#[derive(Debug, Clone)]
pub struct SvgpData {
    pub inputs: SvgpInputs,
    pub targets: DVector<f64>,
}

impl SvgpData {
    pub fn points(x: DMatrix<f64>, y: DVector<f64>) -> Self {
        Self {
            inputs: SvgpInputs::Points(x),
            targets: y,
        }
    }

    pub fn pairs(pairs: Vec<(usize, usize)>, y: DVector<f64>) -> Self {
        Self {
            inputs: SvgpInputs::Pairs(pairs),
            targets: y,
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = match &self.inputs {
            SvgpInputs::Points(x) => x.nrows(),
            SvgpInputs::Pairs(p) => p.len(),
        };
        if n != self.targets.len() {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.targets.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvgpPosterior {
    /// Inducing inputs, one row per inducing point.
    #[serde(with = "crate::serial::b64_matrix")]
    pub inducing: DMatrix<f64>,
    #[serde(with = "crate::serial::b64_vector")]
    pub q_mean: DVector<f64>,
    /// Lower-triangular square root of the whitened covariance.
    #[serde(with = "crate::serial::b64_matrix")]
    pub q_sqrt: DMatrix<f64>,
    pub kernel: KernelParams,
    pub likelihood: Likelihood,
    pub encoder: Option<PointEncoder>,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    posterior: SvgpPosterior,
}

impl SvgpPosterior {
    /// Posterior equal to the prior: `q(u) = p(u)`.
    pub fn from_prior(
        inducing: DMatrix<f64>,
        kernel: KernelParams,
        likelihood: Likelihood,
        encoder: Option<PointEncoder>,
    ) -> Result<Self> {
        let c = inducing.nrows();
        let post = Self {
            inducing,
            q_mean: DVector::zeros(c),
            q_sqrt: DMatrix::identity(c, c),
            kernel,
            likelihood,
            encoder,
        };
        post.validate()?;
        Ok(post)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.inducing.nrows();
        if c == 0 {
            return Err(Error::Empty("inducing points"));
        }
        self.kernel.validate()?;
        if self.inducing.ncols() != self.kernel.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.kernel.dim(),
                got: self.inducing.ncols(),
            });
        }
        if self.q_mean.len() != c || self.q_sqrt.shape() != (c, c) {
            return Err(Error::DimensionMismatch {
                expected: c,
                got: self.q_mean.len(),
            });
        }
        if let Some(enc) = &self.encoder {
            if enc.dim() != self.kernel.dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.kernel.dim(),
                    got: enc.dim(),
                });
            }
        }
        if let Likelihood::Gaussian { noise_var } = self.likelihood {
            if !(noise_var > 0.0 && noise_var.is_finite()) {
                return Err(Error::InvalidHyperparameter(format!(
                    "noise variance must be positive, got {noise_var}"
                )));
            }
        }
        Ok(())
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.nrows()
    }

    pub(crate) fn kuu_cholesky(&self) -> Result<Cholesky<f64, Dyn>> {
        let kuu = self.kernel.gram(&self.inducing)?;
        match Cholesky::new(kuu.clone()) {
            Some(c) => Ok(c),
            None => Ok(jittered_cholesky(&kuu, self.kernel.jitter())?.0),
        }
    }

    /// Unwhitened mean of `q(u)`.
    pub fn inducing_mean(&self) -> Result<DVector<f64>> {
        Ok(self.kuu_cholesky()?.l() * &self.q_mean)
    }

    /// Unwhitened covariance of `q(u)`.
    pub fn inducing_cov(&self) -> Result<DMatrix<f64>> {
        let ls = self.kuu_cholesky()?.l() * &self.q_sqrt;
        Ok(&ls * ls.transpose())
    }

    /// Set `q(u) = N(mean, cov)` in unwhitened coordinates. A zero covariance
    /// gives a zero square root.
    pub fn set_inducing_moments(&mut self, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<()> {
        let c = self.num_inducing();
        if mean.len() != c || cov.shape() != (c, c) {
            return Err(Error::DimensionMismatch {
                expected: c,
                got: mean.len(),
            });
        }
        let l = self.kuu_cholesky()?.l();
        let solve = |m: &DMatrix<f64>| {
            l.solve_lower_triangular(m)
                .ok_or(Error::NotPositiveDefinite { jitter: 0.0 })
        };
        self.q_mean = solve(&DMatrix::from_column_slice(c, 1, mean.as_slice()))?.column(0).into_owned();
        if cov.iter().all(|v| *v == 0.0) {
            self.q_sqrt = DMatrix::zeros(c, c);
            return Ok(());
        }
        let half = solve(cov)?;
        let mut whitened = solve(&half.transpose())?;
        crate::linalg::symmetrize(&mut whitened);
        self.q_sqrt = jittered_cholesky(&whitened, 0.0)?.0.l();
        Ok(())
    }

    /// `KL(q(u) || p(u))`, evaluated in whitened coordinates.
    pub fn kl(&self) -> f64 {
        let c = self.num_inducing() as f64;
        let logdet: f64 = self.q_sqrt.diagonal().iter().map(|d| d.abs().ln()).sum();
        0.5 * (self.q_sqrt.norm_squared() + self.q_mean.norm_squared() - c - 2.0 * logdet)
    }

    /// Encode id pairs through the attached encoder.
    pub fn encode_pairs(&self, pairs: &[(usize, usize)]) -> Result<DMatrix<f64>> {
        match &self.encoder {
            Some(enc) => enc.encode(pairs),
            None => Err(Error::InvalidArgument(
                "posterior has no encoder for id pairs".into(),
            )),
        }
    }

    pub(crate) fn resolve(&self, inputs: &SvgpInputs) -> Result<DMatrix<f64>> {
        match inputs {
            SvgpInputs::Points(x) => Ok(x.clone()),
            SvgpInputs::Pairs(p) => self.encode_pairs(p),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Envelope {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            posterior: self.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let env: Envelope = serde_json::from_str(s)?;
        if env.format != FORMAT_NAME || env.version != FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "unsupported posterior format {} v{}",
                env.format, env.version
            )));
        }
        let mut post = env.posterior;
        if let Some(enc) = post.encoder.as_mut() {
            enc.rebuild_indices()?;
        }
        post.validate()?;
        Ok(post)
    }
}

/// Initial inducing inputs: all points when there are at most `count`,
/// otherwise k-means++ seeding followed by a few Lloyd iterations.
pub fn init_inducing<R: Rng + ?Sized>(points: &DMatrix<f64>, count: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    let n = points.nrows();
    if n == 0 || count == 0 {
        return Err(Error::Empty("inducing initialization"));
    }
    if n <= count {
        return Ok(points.clone());
    }
    let d = points.ncols();
    let sq = |i: usize, c: &DMatrix<f64>, j: usize| -> f64 {
        (0..d).map(|k| (points[(i, k)] - c[(j, k)]).powi(2)).sum()
    };
    let mut centers = DMatrix::<f64>::zeros(count, d);
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from(&points.row(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq(i, &centers, 0)).collect();
    for c in 1..count {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in nearest.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from(&points.row(pick));
        for (i, best) in nearest.iter_mut().enumerate() {
            *best = best.min(sq(i, &centers, c));
        }
    }
    let mut assign = vec![0usize; n];
    for _ in 0..10 {
        for (i, a) in assign.iter_mut().enumerate() {
            let mut best = f64::INFINITY;
            for c in 0..count {
                let v = sq(i, &centers, c);
                if v < best {
                    best = v;
                    *a = c;
                }
            }
        }
        let mut sums = DMatrix::<f64>::zeros(count, d);
        let mut counts = vec![0usize; count];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for k in 0..d {
                sums[(a, k)] += points[(i, k)];
            }
        }
        for c in 0..count {
            // Empty clusters keep their previous center.
            if counts[c] > 0 {
                for k in 0..d {
                    centers[(c, k)] = sums[(c, k)] / counts[c] as f64;
                }
            }
        }
    }
    Ok(centers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelFamily;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn posterior(c: usize) -> SvgpPosterior {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = DMatrix::from_fn(c, 2, |_, _| rng.random_range(-1.0..1.0));
        let k = KernelParams::new(KernelFamily::Matern32, 1.2, vec![0.7, 1.3]).unwrap();
        SvgpPosterior::from_prior(z, k, Likelihood::Bernoulli, None).unwrap()
    }

    #[test]
    fn prior_has_zero_kl() {
        assert!(posterior(6).kl().abs() < 1e-12);
    }

    #[test]
    fn moments_round_trip() {
        let mut post = posterior(5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let s = &b * b.transpose() + DMatrix::identity(5, 5) * 0.1;
        let m = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
        post.set_inducing_moments(&m, &s).unwrap();
        assert!((post.inducing_mean().unwrap() - m).amax() < 1e-9);
        let back = post.inducing_cov().unwrap();
        assert!((&back - &s).norm() / s.norm() < 1e-8);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut post = posterior(4);
        post.q_mean[2] = 0.1 + 0.2;
        post.q_sqrt[(3, 1)] = -1.0 / 3.0;
        let json = post.to_json().unwrap();
        let back = SvgpPosterior::from_json(&json).unwrap();
        assert_eq!(post, back);
    }

    #[test]
    fn json_version_checked() {
        let json = posterior(2).to_json().unwrap().replace("\"version\":1", "\"version\":99");
        assert!(matches!(SvgpPosterior::from_json(&json), Err(Error::Incompatible(_))));
    }

    #[test]
    fn inducing_init_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(50, 3, |_, _| rng.random_range(-1.0..1.0));
        let z = init_inducing(&x, 10, &mut rng).unwrap();
        assert_eq!(z.shape(), (10, 3));
        let all = init_inducing(&x.rows(0, 5).into_owned(), 10, &mut rng).unwrap();
        assert_eq!(all.nrows(), 5);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let k = KernelParams::isotropic(KernelFamily::Rbf, 1.0, 1.0, 3).unwrap();
        assert!(SvgpPosterior::from_prior(DMatrix::zeros(2, 2), k, Likelihood::Bernoulli, None).is_err());
    }
}
