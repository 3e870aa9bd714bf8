//! Distribution of a candidate's accumulative metric `v̂ = (1/T) P_:ᵀ m̄`
//! under the surrogate posterior.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp_exact::{ExactGpPosterior, PredictiveCov};
use crate::linalg::{jittered_cholesky, sigmoid};
use crate::policy::{column_sums, CompactPolicy, PolicyMatrix};
use crate::quadrature::GaussHermite;
use crate::svgp::{LatentFactors, Likelihood, PredictMode, SvgpPosterior};

/// Latent samples are clipped to this range before the logistic link.
pub const LINK_CLAMP: f64 = 30.0;
pub const DEFAULT_SAMPLES: usize = 1000;
/// Samples drawn per block; bounds memory at `block × |W|` values.
const SAMPLE_BLOCK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MetricDistribution {
    Gaussian { mean: f64, variance: f64 },
    Samples { samples: Vec<f64>, seed: u64 },
}

impl MetricDistribution {
    pub fn mean(&self) -> f64 {
        match self {
            MetricDistribution::Gaussian { mean, .. } => *mean,
            MetricDistribution::Samples { samples, .. } => samples.iter().sum::<f64>() / samples.len().max(1) as f64,
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            MetricDistribution::Gaussian { variance, .. } => *variance,
            MetricDistribution::Samples { samples, .. } => {
                let n = samples.len();
                if n < 2 {
                    return 0.0;
                }
                let m = self.mean();
                samples.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (n - 1) as f64
            }
        }
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GaussianMode {
    /// Exact GP posterior.
    Exact,
    /// Sparse posterior with its full predictive covariance.
    Sparse,
    /// Sparse posterior with the FITC diagonal-plus-low-rank covariance.
    Fitc,
}

#[derive(Debug, Clone, Copy)]
pub enum Surrogate<'a> {
    Exact(&'a ExactGpPosterior),
    Sparse(&'a SvgpPosterior),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingScheme {
    /// Draw `u ~ q(u)`, then `f | u` with the FITC diagonal conditional.
    PseudoData,
    /// Joint draw from the full predictive covariance; cubic in `|W|`.
    FullCovariance,
}

fn check_shapes(p: &PolicyMatrix, w_points: &DMatrix<f64>) -> Result<()> {
    if p.flat().len() != w_points.nrows() {
        return Err(Error::DimensionMismatch {
            expected: p.flat().len(),
            got: w_points.nrows(),
        });
    }
    if p.n_inputs() == 0 {
        return Err(Error::Empty("evaluation grid"));
    }
    Ok(())
}

/// `pᵀ K(W, W) p` without materializing the full matrix.
fn prior_quadratic_form(post: &SvgpPosterior, w: &DMatrix<f64>, p: &DVector<f64>) -> Result<f64> {
    let n = w.nrows();
    let block = 1024;
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let len = block.min(n - start);
        let k = post.kernel.kernel_matrix(&w.rows(start, len).into_owned(), w)?;
        total += p.rows(start, len).dot(&(k * p));
        start += len;
    }
    Ok(total)
}

/// Gaussian metric distribution for a Gaussian-likelihood surrogate:
/// mean `(1/T) pᵀ μ`, variance `(1/T²) pᵀ Σ p`.
pub fn metric_gaussian(
    surrogate: Surrogate<'_>,
    p: &PolicyMatrix,
    w_points: &DMatrix<f64>,
    mode: GaussianMode,
) -> Result<MetricDistribution> {
    check_shapes(p, w_points)?;
    let t = p.n_inputs() as f64;
    let pv = DVector::from_column_slice(p.flat());
    let (mean, quad) = match (surrogate, mode) {
        (Surrogate::Exact(post), GaussianMode::Exact) => {
            let (mu, cov) = post.predict_f(w_points, true)?;
            let cov = match cov {
                PredictiveCov::Full(c) => c,
                PredictiveCov::Diag(_) => unreachable!("full covariance requested"),
            };
            (pv.dot(&mu), pv.dot(&(cov * &pv)))
        }
        (Surrogate::Sparse(post), GaussianMode::Sparse | GaussianMode::Fitc) => {
            if !matches!(post.likelihood, Likelihood::Gaussian { .. }) {
                return Err(Error::Incompatible(
                    "closed-form metric needs a Gaussian likelihood".into(),
                ));
            }
            let f = post.latent_factors(w_points)?;
            let low_rank = (&f.factor * &pv).norm_squared();
            let quad = if mode == GaussianMode::Fitc {
                f.residual.iter().zip(pv.iter()).map(|(r, q)| r * q * q).sum::<f64>() + low_rank
            } else {
                // Full mode: pᵀK**p − ||L⁻¹K_u* p||² + ||q_sqrtᵀ L⁻¹K_u* p||².
                let linv = crate::linalg::lower_triangular_inverse(&post.kuu_cholesky()?.l());
                let ap = &linv * (post.kernel.kernel_matrix(&post.inducing, w_points)? * &pv);
                prior_quadratic_form(post, w_points, &pv)? - ap.norm_squared() + low_rank
            };
            (pv.dot(&f.mean), quad)
        }
        _ => {
            return Err(Error::Incompatible(format!(
                "mode {mode:?} does not match the surrogate type"
            )))
        }
    };
    let variance = quad / (t * t);
    Ok(MetricDistribution::Gaussian {
        mean: mean / t,
        variance: if variance < 0.0 && variance > -1e-10 { 0.0 } else { variance.max(0.0) },
    })
}

/// Samples of `v̂ = (1/T) P_:ᵀ σ(f)` for a single candidate.
pub fn metric_samples_binary(
    post: &SvgpPosterior,
    p: &PolicyMatrix,
    w_points: &DMatrix<f64>,
    n_samples: usize,
    seed: u64,
    scheme: SamplingScheme,
) -> Result<MetricDistribution> {
    check_shapes(p, w_points)?;
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be positive".into()));
    }
    if !matches!(post.likelihood, Likelihood::Bernoulli) {
        return Err(Error::Incompatible("binary sampling needs a Bernoulli likelihood".into()));
    }
    let compact = CompactPolicy::from_policy(p);
    let samples = match scheme {
        SamplingScheme::PseudoData => {
            let engine = BinaryMetricEngine::new(post, w_points, p.n_decisions())?;
            engine.samples(std::slice::from_ref(&compact), n_samples, seed).remove(0)
        }
        SamplingScheme::FullCovariance => {
            let (mean, cov) = post.predict_latent(w_points, PredictMode::Full)?;
            let l = jittered_cholesky(&cov, 1e-12)?.0.l();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = p.n_inputs() as f64;
            (0..n_samples)
                .map(|_| {
                    let eps = DVector::<f64>::from_fn(mean.len(), |_, _| StandardNormal.sample(&mut rng));
                    let f = &mean + &l * eps;
                    let link: Vec<f64> = f.iter().map(|v| sigmoid(v.clamp(-LINK_CLAMP, LINK_CLAMP))).collect();
                    compact.contract(&link, &column_sums(&link, p.n_decisions())) / t
                })
                .collect()
        }
    };
    Ok(MetricDistribution::Samples { samples, seed })
}

/// Scores many candidates against one Bernoulli-likelihood posterior.
///
/// The latent factors over the grid are computed once; sampling uses common
/// random numbers across candidates so their differences are not masked by
/// independent Monte Carlo noise.
pub struct BinaryMetricEngine {
    factors: LatentFactors,
    expected_link: Vec<f64>,
    expected_link_sums: Vec<f64>,
    n_decisions: usize,
    n_inputs: usize,
}

impl BinaryMetricEngine {
    pub fn new(post: &SvgpPosterior, w_points: &DMatrix<f64>, n_decisions: usize) -> Result<Self> {
        if n_decisions == 0 || !w_points.nrows().is_multiple_of(n_decisions) {
            return Err(Error::InvalidArgument(format!(
                "{} grid points do not split into {n_decisions} decisions",
                w_points.nrows()
            )));
        }
        let factors = post.latent_factors(w_points)?;
        let gh = GaussHermite::new(20)?;
        let variances = factors.variances();
        let expected_link: Vec<f64> = factors
            .mean
            .iter()
            .zip(variances.iter())
            .map(|(m, v)| gh.expectation(*m, *v, |f| sigmoid(f.clamp(-LINK_CLAMP, LINK_CLAMP))))
            .collect();
        let expected_link_sums = column_sums(&expected_link, n_decisions);
        Ok(Self {
            n_inputs: w_points.nrows() / n_decisions,
            factors,
            expected_link,
            expected_link_sums,
            n_decisions,
        })
    }

    /// `E[v̂]` by per-point quadrature of `E[σ(f_w)]`; exact up to quadrature error.
    pub fn mean(&self, policy: &CompactPolicy) -> f64 {
        policy.contract(&self.expected_link, &self.expected_link_sums) / self.n_inputs as f64
    }

    /// `n_samples` draws of `v̂` for every policy, sharing the latent draws.
    pub fn samples(&self, policies: &[CompactPolicy], n_samples: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = self.factors.factor.nrows();
        let w = self.factors.len();
        let t = self.n_inputs as f64;
        let sd: Vec<f64> = self.factors.residual.iter().map(|r| r.sqrt()).collect();
        let mut out = vec![Vec::with_capacity(n_samples); policies.len()];
        let mut done = 0;
        while done < n_samples {
            let s = SAMPLE_BLOCK.min(n_samples - done);
            let eps_u = DMatrix::<f64>::from_fn(c, s, |_, _| StandardNormal.sample(&mut rng));
            let mut f = (eps_u.transpose() * &self.factors.factor).transpose();
            for j in 0..s {
                let mut col = f.column_mut(j);
                for i in 0..w {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    let v = col[i] + self.factors.mean[i] + sd[i] * e;
                    col[i] = sigmoid(v.clamp(-LINK_CLAMP, LINK_CLAMP));
                }
            }
            let sums: Vec<Vec<f64>> = (0..s)
                .map(|j| column_sums(f.column(j).as_slice(), self.n_decisions))
                .collect();
            let block: Vec<Vec<f64>> = policies
                .par_iter()
                .map(|p| {
                    (0..s)
                        .map(|j| p.contract(f.column(j).as_slice(), &sums[j]) / t)
                        .collect()
                })
                .collect();
            for (o, b) in out.iter_mut().zip(block) {
                o.extend(b);
            }
            done += s;
        }
        out
    }
}

/// Scores many candidates against one Gaussian-likelihood sparse posterior
/// in FITC mode, with per-candidate cost linear in the grid's input count.
pub struct GaussianMetricEngine {
    factors: LatentFactors,
    mean_sums: Vec<f64>,
    residual_sums: Vec<f64>,
    /// Factor columns summed over decisions: `C × T`.
    factor_sums: DMatrix<f64>,
}

impl GaussianMetricEngine {
    pub fn new(post: &SvgpPosterior, w_points: &DMatrix<f64>, n_decisions: usize) -> Result<Self> {
        if n_decisions == 0 || !w_points.nrows().is_multiple_of(n_decisions) {
            return Err(Error::InvalidArgument("grid does not split into decisions".into()));
        }
        let factors = post.latent_factors(w_points)?;
        let t = w_points.nrows() / n_decisions;
        let mut factor_sums = DMatrix::zeros(factors.factor.nrows(), t);
        for (i, col) in factors.factor.column_iter().enumerate() {
            let mut target = factor_sums.column_mut(i / n_decisions);
            target += col;
        }
        Ok(Self {
            mean_sums: column_sums(factors.mean.as_slice(), n_decisions),
            residual_sums: column_sums(factors.residual.as_slice(), n_decisions),
            factor_sums,
            factors,
        })
    }

    pub fn distribution(&self, policy: &CompactPolicy) -> MetricDistribution {
        let t = policy.floor.len() as f64;
        let mean = policy.contract(self.factors.mean.as_slice(), &self.mean_sums) / t;
        let mut fp = &self.factor_sums * DVector::from_column_slice(&policy.floor);
        for &(i, e) in &policy.extras {
            fp.axpy(e, &self.factors.factor.column(i), 1.0);
        }
        let quad = policy.contract_squared(self.factors.residual.as_slice(), &self.residual_sums) + fp.norm_squared();
        MetricDistribution::Gaussian {
            mean,
            variance: (quad / (t * t)).max(0.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{KernelFamily, KernelParams};
    use crate::policy::{policy_matrix, CandidateModel, EvalGrid};
    use rand::Rng;

    fn bernoulli_posterior(rng: &mut ChaCha8Rng, c: usize) -> SvgpPosterior {
        let z = DMatrix::<f64>::from_fn(c, 2, |_, _| rng.random_range(-2.0..2.0));
        let k = KernelParams::new(KernelFamily::Matern32, 1.0, vec![1.0, 1.0]).unwrap();
        let mut post = SvgpPosterior::from_prior(z, k, Likelihood::Bernoulli, None).unwrap();
        post.q_mean = DVector::from_fn(c, |_, _| rng.random_range(-1.0..1.0));
        post
    }

    fn grid_points(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        DMatrix::<f64>::from_fn(n, 2, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn point_mass_at_zero_gives_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut post = bernoulli_posterior(&mut rng, 3);
        post.q_mean.fill(0.0);
        post.q_sqrt.fill(0.0);
        post.kernel.variance = 1e-14;
        let w = grid_points(&mut rng, 6);
        let m = CandidateModel::new("m", 3, 0.1, vec![vec![0], vec![2]]).unwrap();
        let p = policy_matrix(&m, &EvalGrid::full(2, 3)).unwrap();
        let d = metric_samples_binary(&post, &p, &w, 50, 3, SamplingScheme::PseudoData).unwrap();
        if let MetricDistribution::Samples { samples, .. } = d {
            assert!(samples.iter().all(|s| (s - 0.5).abs() < 1e-6));
        }
    }

    #[test]
    fn saturated_link_gives_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut post = bernoulli_posterior(&mut rng, 3);
        post.kernel.variance = 1e-14;
        post.q_sqrt.fill(0.0);
        let w = grid_points(&mut rng, 4);
        let engine = BinaryMetricEngine::new(&post, &w, 2).unwrap();
        // Force a huge latent mean through the stored factors.
        let engine = BinaryMetricEngine {
            factors: LatentFactors {
                mean: DVector::from_element(4, 1e6),
                ..engine.factors
            },
            ..engine
        };
        let m = CandidateModel::new("m", 2, 0.05, vec![vec![0], vec![1]]).unwrap();
        let cp = CompactPolicy::from_model(&m, &EvalGrid::full(2, 2)).unwrap();
        let s = engine.samples(&[cp], 20, 1);
        assert!(s[0].iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn samples_in_unit_interval_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let post = bernoulli_posterior(&mut rng, 5);
        let w = grid_points(&mut rng, 12);
        let m = CandidateModel::new("m", 3, 0.05, vec![vec![0], vec![1], vec![2], vec![1, 2]]).unwrap();
        let p = policy_matrix(&m, &EvalGrid::full(4, 3)).unwrap();
        let a = metric_samples_binary(&post, &p, &w, 100, 9, SamplingScheme::PseudoData).unwrap();
        let b = metric_samples_binary(&post, &p, &w, 100, 9, SamplingScheme::PseudoData).unwrap();
        assert_eq!(a, b);
        if let MetricDistribution::Samples { samples, .. } = a {
            assert!(samples.iter().all(|s| (0.0..=1.0).contains(s)));
        }
    }

    #[test]
    fn engine_mean_matches_sample_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let post = bernoulli_posterior(&mut rng, 6);
        let w = grid_points(&mut rng, 9);
        let m = CandidateModel::new("m", 3, 0.05, vec![vec![0], vec![1], vec![2]]).unwrap();
        let cp = CompactPolicy::from_model(&m, &EvalGrid::full(3, 3)).unwrap();
        let engine = BinaryMetricEngine::new(&post, &w, 3).unwrap();
        let s = &engine.samples(std::slice::from_ref(&cp), 20000, 5)[0];
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let sd = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s.len() - 1) as f64).sqrt();
        assert!((engine.mean(&cp) - mean).abs() < 4.0 * sd / (s.len() as f64).sqrt());
    }

    #[test]
    fn sample_spread_vanishes_with_posterior_uncertainty() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut post = bernoulli_posterior(&mut rng, 4);
        post.q_mean.fill(0.0);
        post.q_sqrt.fill(0.0);
        post.kernel.variance = 1e-12;
        let w = grid_points(&mut rng, 4);
        let m = CandidateModel::uniform("u", 2, 2);
        let p = policy_matrix(&m, &EvalGrid::full(2, 2)).unwrap();
        let d = metric_samples_binary(&post, &p, &w, 200, 1, SamplingScheme::PseudoData).unwrap();
        assert!((d.mean() - 0.5).abs() < 1e-6);
        assert!(d.variance() < 1e-10);
    }

    #[test]
    fn gaussian_metric_is_linear_in_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut post = bernoulli_posterior(&mut rng, 5);
        post.likelihood = Likelihood::Gaussian { noise_var: 0.1 };
        let w = grid_points(&mut rng, 6);
        let g = EvalGrid::full(3, 2);
        let p1 = policy_matrix(&CandidateModel::new("a", 2, 0.1, vec![vec![0]; 3]).unwrap(), &g).unwrap();
        let p2 = policy_matrix(&CandidateModel::new("b", 2, 0.3, vec![vec![1]; 3]).unwrap(), &g).unwrap();
        let lam = 0.3;
        let mix = PolicyMatrix::from_matrix(p1.matrix() * lam + p2.matrix() * (1.0 - lam)).unwrap();
        let m = |p: &PolicyMatrix| metric_gaussian(Surrogate::Sparse(&post), p, &w, GaussianMode::Sparse).unwrap().mean();
        assert!((m(&mix) - (lam * m(&p1) + (1.0 - lam) * m(&p2))).abs() < 1e-12);
    }

    #[test]
    fn fitc_engine_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut post = bernoulli_posterior(&mut rng, 5);
        post.likelihood = Likelihood::Gaussian { noise_var: 0.1 };
        let w = grid_points(&mut rng, 12);
        let g = EvalGrid::full(4, 3);
        let m = CandidateModel::new("a", 3, 0.1, vec![vec![0], vec![1, 2], vec![2], vec![0]]).unwrap();
        let p = policy_matrix(&m, &g).unwrap();
        let direct = metric_gaussian(Surrogate::Sparse(&post), &p, &w, GaussianMode::Fitc).unwrap();
        let engine = GaussianMetricEngine::new(&post, &w, 3).unwrap();
        let fast = engine.distribution(&CompactPolicy::from_policy(&p));
        assert!((direct.mean() - fast.mean()).abs() < 1e-12);
        assert!((direct.variance() - fast.variance()).abs() < 1e-12);
        let sparse = metric_gaussian(Surrogate::Sparse(&post), &p, &w, GaussianMode::Sparse).unwrap();
        assert!((sparse.mean() - fast.mean()).abs() < 1e-12);
    }

    #[test]
    fn mode_and_likelihood_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let post = bernoulli_posterior(&mut rng, 3);
        let w = grid_points(&mut rng, 2);
        let p = policy_matrix(&CandidateModel::uniform("u", 2, 1), &EvalGrid::full(1, 2)).unwrap();
        assert!(metric_gaussian(Surrogate::Sparse(&post), &p, &w, GaussianMode::Fitc).is_err());
        assert!(metric_gaussian(Surrogate::Sparse(&post), &p, &w, GaussianMode::Exact).is_err());
        assert!(metric_samples_binary(&post, &p, &w, 0, 1, SamplingScheme::PseudoData).is_err());
    }
}
