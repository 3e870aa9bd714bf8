//! Exact GP regression with Gaussian noise.
//!
//! Used by the BO baseline and as the reference for the sparse surrogate.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelParams};
use crate::linalg::{chol_logdet, jittered_cholesky};
use crate::optim::Adam;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone)]
pub struct ExactGpPosterior {
    pub inputs: DMatrix<f64>,
    pub targets: DVector<f64>,
    pub kernel: KernelParams,
    pub noise_var: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

/// Predictive covariance: either the full matrix or only its diagonal.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictiveCov {
    Full(DMatrix<f64>),
    Diag(DVector<f64>),
}

impl PredictiveCov {
    pub fn diagonal(&self) -> DVector<f64> {
        match self {
            PredictiveCov::Full(m) => m.diagonal(),
            PredictiveCov::Diag(d) => d.clone(),
        }
    }
}

/// Gradient of the log marginal likelihood in log-parameter space.
#[derive(Debug, Clone)]
pub struct LmlGrad {
    pub log_variance: f64,
    pub log_lengthscales: DVector<f64>,
    pub log_noise: f64,
}

pub fn fit_exact(
    inputs: &DMatrix<f64>,
    targets: &DVector<f64>,
    kernel: &KernelParams,
    noise_var: f64,
) -> Result<ExactGpPosterior> {
    if inputs.nrows() == 0 {
        return Err(Error::Empty("exact GP training data"));
    }
    if inputs.nrows() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: inputs.nrows(),
            got: targets.len(),
        });
    }
    if !(noise_var > 0.0 && noise_var.is_finite()) {
        return Err(Error::InvalidHyperparameter(format!(
            "noise variance must be positive, got {noise_var}"
        )));
    }
    let mut k = kernel.kernel_matrix(inputs, inputs)?;
    for i in 0..k.nrows() {
        k[(i, i)] += noise_var;
    }
    let chol = match Cholesky::new(k.clone()) {
        Some(c) => c,
        None => jittered_cholesky(&k, kernel.jitter())?.0,
    };
    let alpha = chol.solve(targets);
    Ok(ExactGpPosterior {
        inputs: inputs.clone(),
        targets: targets.clone(),
        kernel: kernel.clone(),
        noise_var,
        chol,
        alpha,
    })
}

impl ExactGpPosterior {
    pub fn n(&self) -> usize {
        self.inputs.nrows()
    }

    /// Lower Cholesky factor of `K + σ²I`.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        -0.5 * self.targets.dot(&self.alpha) - 0.5 * chol_logdet(&self.chol) - 0.5 * self.n() as f64 * LN_2PI
    }

    pub fn lml_gradient(&self) -> LmlGrad {
        let n = self.n();
        let kinv = self.chol.inverse();
        let mut w = &self.alpha * self.alpha.transpose() - &kinv;
        w *= 0.5;
        let g = self
            .kernel
            .weighted_grads(&self.inputs, &self.inputs, &w, false, false);
        let trace: f64 = (0..n).map(|i| w[(i, i)]).sum();
        LmlGrad {
            log_variance: g.log_variance,
            log_lengthscales: g.log_lengthscales,
            log_noise: self.noise_var * trace,
        }
    }

    /// Noise-free predictive distribution of `f` at `xstar`.
    pub fn predict_f(&self, xstar: &DMatrix<f64>, full_cov: bool) -> Result<(DVector<f64>, PredictiveCov)> {
        if xstar.nrows() > 0 && xstar.ncols() != self.inputs.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.inputs.ncols(),
                got: xstar.ncols(),
            });
        }
        let m = xstar.nrows();
        if m == 0 {
            let cov = if full_cov {
                PredictiveCov::Full(DMatrix::zeros(0, 0))
            } else {
                PredictiveCov::Diag(DVector::zeros(0))
            };
            return Ok((DVector::zeros(0), cov));
        }
        let k_sx = self.kernel.kernel_matrix(xstar, &self.inputs)?;
        let mean = &k_sx * &self.alpha;
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&k_sx.transpose())
            .expect("cholesky factor has a positive diagonal");
        let cov = if full_cov {
            let mut c = self.kernel.kernel_matrix(xstar, xstar)? - v.transpose() * &v;
            crate::linalg::symmetrize(&mut c);
            PredictiveCov::Full(c)
        } else {
            let d = DVector::from_iterator(
                m,
                v.column_iter()
                    .map(|c| (self.kernel.variance - c.norm_squared()).max(0.0)),
            );
            PredictiveCov::Diag(d)
        };
        let cov = match cov {
            PredictiveCov::Full(mut c) => {
                for i in 0..m {
                    if c[(i, i)] < 0.0 && c[(i, i)] > -1e-10 {
                        c[(i, i)] = 0.0;
                    }
                }
                PredictiveCov::Full(c)
            }
            d => d,
        };
        Ok((mean, cov))
    }
}

/// Settings for type-II maximum likelihood fitting.
#[derive(Debug, Clone)]
pub struct HyperFitConfig {
    pub restarts: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub min_noise: f64,
}

impl Default for HyperFitConfig {
    fn default() -> Self {
        Self {
            restarts: 4,
            steps: 150,
            learning_rate: 0.05,
            min_noise: 1e-6,
        }
    }
}

/// Maximize the log marginal likelihood over `(log σ_f², log ℓ, log σ²)` by
/// gradient ascent from several random starts; returns the best posterior.
pub fn fit_hyperparameters<R: Rng + ?Sized>(
    inputs: &DMatrix<f64>,
    targets: &DVector<f64>,
    family: KernelFamily,
    cfg: &HyperFitConfig,
    rng: &mut R,
) -> Result<ExactGpPosterior> {
    let dim = inputs.ncols();
    let y_var = {
        let n = targets.len() as f64;
        let mean = targets.sum() / n;
        (targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).max(1e-4)
    };
    let mut best: Option<ExactGpPosterior> = None;
    for restart in 0..cfg.restarts.max(1) {
        // First start is a data-driven default; the rest are randomized around it.
        let mut params: Vec<f64> = if restart == 0 {
            let mut p = vec![y_var.ln()];
            p.extend(std::iter::repeat_n(0.0, dim));
            p.push((0.1 * y_var).ln());
            p
        } else {
            let mut p = vec![y_var.ln() + rng.random_range(-1.0..1.0)];
            p.extend((0..dim).map(|_| rng.random_range(-1.5..1.0)));
            p.push((y_var * rng.random_range(0.01..0.5)).ln());
            p
        };
        let mut adam = Adam::new(params.len(), cfg.learning_rate);
        let build = |p: &[f64]| -> Result<ExactGpPosterior> {
            let kernel = KernelParams::new(family, p[0].exp(), p[1..=dim].iter().map(|v| v.exp()).collect())?;
            fit_exact(inputs, targets, &kernel, p[dim + 1].exp().max(cfg.min_noise))
        };
        let mut post = match build(&params) {
            Ok(p) => p,
            Err(_) => continue,
        };
        for _ in 0..cfg.steps {
            let g = post.lml_gradient();
            let mut grad = vec![-g.log_variance];
            grad.extend(g.log_lengthscales.iter().map(|v| -v));
            grad.push(-g.log_noise);
            adam.step(&mut params, &grad);
            for p in params.iter_mut() {
                *p = p.clamp(-12.0, 12.0);
            }
            params[dim + 1] = params[dim + 1].max(cfg.min_noise.ln());
            match build(&params) {
                Ok(p) => post = p,
                Err(_) => break,
            }
        }
        let lml = post.log_marginal_likelihood();
        if lml.is_finite()
            && best
                .as_ref()
                .is_none_or(|b| lml > b.log_marginal_likelihood())
        {
            best = Some(post);
        }
    }
    best.ok_or(Error::NotPositiveDefinite { jitter: 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_problem(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (DMatrix<f64>, DVector<f64>) {
        let x = DMatrix::<f64>::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
        let y = DVector::from_fn(n, |i, _| x[(i, 0)].sin() + rng.random_range(-0.2..0.2));
        (x, y)
    }

    /// Textbook formulas with explicit inverses.
    fn naive_predict(
        k: &KernelParams,
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        noise: f64,
        xs: &DMatrix<f64>,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let n = x.nrows();
        let mut kxx = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                kxx[(i, j)] = k.eval(x.row(i).transpose().as_slice(), x.row(j).transpose().as_slice());
            }
            kxx[(i, i)] += noise;
        }
        let kinv = kxx.try_inverse().unwrap();
        let m = xs.nrows();
        let ksx = DMatrix::from_fn(m, n, |i, j| {
            k.eval(xs.row(i).transpose().as_slice(), x.row(j).transpose().as_slice())
        });
        let kss = DMatrix::from_fn(m, m, |i, j| {
            k.eval(xs.row(i).transpose().as_slice(), xs.row(j).transpose().as_slice())
        });
        (&ksx * &kinv * y, kss - &ksx * &kinv * ksx.transpose())
    }

    #[test]
    fn single_point_posterior_mean() {
        let k = KernelParams::isotropic(KernelFamily::Rbf, 1.0, 1.0, 1).unwrap();
        let x = DMatrix::from_element(1, 1, 0.0);
        let post = fit_exact(&x, &DVector::from_element(1, 2.0), &k, 1.0).unwrap();
        let (mean, _) = post.predict_f(&x, false).unwrap();
        assert_relative_eq!(mean[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_query_and_interpolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, y) = random_problem(&mut rng, 5, 1);
        let k = KernelParams::isotropic(KernelFamily::Matern52, 1.0, 0.8, 1).unwrap();
        let post = fit_exact(&x, &y, &k, 1e-12).unwrap();
        let (mean, cov) = post.predict_f(&DMatrix::zeros(0, 1), true).unwrap();
        assert_eq!(mean.len(), 0);
        assert_eq!(cov, PredictiveCov::Full(DMatrix::zeros(0, 0)));
        let (mean, _) = post.predict_f(&x, false).unwrap();
        for i in 0..5 {
            assert!((mean[i] - y[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (x, y) = random_problem(&mut rng, 8, 2);
        let k = KernelParams::isotropic(KernelFamily::Rbf, 1.7, 0.5, 2).unwrap();
        let post = fit_exact(&x, &y, &k, 0.1).unwrap();
        let far = DMatrix::from_row_slice(1, 2, &[100.0, -100.0]);
        let (mean, cov) = post.predict_f(&far, false).unwrap();
        assert!(mean[0].abs() < 1e-6);
        assert!((cov.diagonal()[0] - 1.7).abs() < 1e-6);
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let (x, y) = random_problem(&mut rng, 3, 2);
            let xs = DMatrix::from_fn(1, 2, |_, _| rng.random_range(-2.0..2.0));
            let k = KernelParams::new(KernelFamily::Matern32, 1.3, vec![0.9, 1.4]).unwrap();
            let post = fit_exact(&x, &y, &k, 0.2).unwrap();
            let (m, c) = post.predict_f(&xs, true).unwrap();
            let (mo, co) = naive_predict(&k, &x, &y, 0.2, &xs);
            assert!((m[0] - mo[0]).abs() < 1e-8);
            match c {
                PredictiveCov::Full(c) => assert!((c[(0, 0)] - co[(0, 0)]).abs() < 1e-8),
                PredictiveCov::Diag(_) => unreachable!(),
            }
        }
    }

    #[test]
    fn full_and_diag_agree_and_cov_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (x, y) = random_problem(&mut rng, 12, 2);
        let k = KernelParams::new(KernelFamily::Rbf, 1.0, vec![0.7, 1.1]).unwrap();
        let post = fit_exact(&x, &y, &k, 0.05).unwrap();
        let (_, full) = post.predict_f(&x, true).unwrap();
        let (_, diag) = post.predict_f(&x, false).unwrap();
        let full_m = match &full {
            PredictiveCov::Full(m) => m.clone(),
            _ => unreachable!(),
        };
        assert!((full.diagonal() - diag.diagonal()).amax() < 1e-10);
        assert_eq!(full_m, full_m.transpose());
        let eig = full_m.symmetric_eigenvalues();
        assert!(eig.iter().all(|e| *e > -1e-10));
    }

    #[test]
    fn cholesky_reproduces_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (x, y) = random_problem(&mut rng, 15, 3);
        let k = KernelParams::new(KernelFamily::Matern52, 2.0, vec![0.5, 1.0, 2.0]).unwrap();
        let post = fit_exact(&x, &y, &k, 0.3).unwrap();
        let l = post.cholesky_factor();
        let mut kk = k.kernel_matrix(&x, &x).unwrap();
        for i in 0..15 {
            kk[(i, i)] += 0.3;
        }
        let rel = (&l * l.transpose() - &kk).norm() / kk.norm();
        assert!(rel < 1e-8);
    }

    #[test]
    fn adding_a_point_never_increases_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..20 {
            let (x, y) = random_problem(&mut rng, 7, 2);
            let xs = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-2.0..2.0));
            let k = KernelParams::new(KernelFamily::Matern32, 1.0, vec![0.8, 0.8]).unwrap();
            let small = fit_exact(&x.rows(0, 6).into_owned(), &y.rows(0, 6).into_owned(), &k, 0.1).unwrap();
            let big = fit_exact(&x, &y, &k, 0.1).unwrap();
            let vs = small.predict_f(&xs, false).unwrap().1.diagonal();
            let vb = big.predict_f(&xs, false).unwrap().1.diagonal();
            for i in 0..4 {
                assert!(vb[i] <= vs[i] + 1e-8);
            }
        }
    }

    #[test]
    fn lml_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for family in [KernelFamily::Rbf, KernelFamily::Matern32, KernelFamily::Matern52] {
            let (x, y) = random_problem(&mut rng, 10, 2);
            let base = [0.3f64, -0.2, 0.4, -1.5];
            let lml = |p: &[f64]| {
                let k = KernelParams::new(family, p[0].exp(), vec![p[1].exp(), p[2].exp()]).unwrap();
                fit_exact(&x, &y, &k, p[3].exp()).unwrap().log_marginal_likelihood()
            };
            let k = KernelParams::new(family, base[0].exp(), vec![base[1].exp(), base[2].exp()]).unwrap();
            let g = fit_exact(&x, &y, &k, base[3].exp()).unwrap().lml_gradient();
            let analytic = [g.log_variance, g.log_lengthscales[0], g.log_lengthscales[1], g.log_noise];
            let h = 1e-5;
            for i in 0..4 {
                let mut p = base;
                p[i] += h;
                let mut m = base;
                m[i] -= h;
                let fd = (lml(&p) - lml(&m)) / (2.0 * h);
                let rel = (analytic[i] - fd).abs() / fd.abs().max(1e-8);
                assert!(rel < 1e-4, "param {i}: analytic {} fd {fd}", analytic[i]);
            }
        }
    }

    #[test]
    fn hyperparameter_fit_improves_lml() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let (x, y) = random_problem(&mut rng, 20, 1);
        let k0 = KernelParams::isotropic(KernelFamily::Matern52, y.variance().max(1e-4), 1.0, 1).unwrap();
        let start = fit_exact(&x, &y, &k0, 0.1 * y.variance()).unwrap();
        let fitted =
            fit_hyperparameters(&x, &y, KernelFamily::Matern52, &HyperFitConfig::default(), &mut rng).unwrap();
        assert!(fitted.log_marginal_likelihood() >= start.log_marginal_likelihood());
    }

    #[test]
    fn rejects_bad_inputs() {
        let k = KernelParams::isotropic(KernelFamily::Rbf, 1.0, 1.0, 1).unwrap();
        let x = DMatrix::from_element(1, 1, 0.0);
        assert!(fit_exact(&DMatrix::zeros(0, 1), &DVector::zeros(0), &k, 1.0).is_err());
        assert!(fit_exact(&x, &DVector::from_element(1, 0.0), &k, 0.0).is_err());
        let post = fit_exact(&x, &DVector::from_element(1, 0.0), &k, 1.0).unwrap();
        assert!(post.predict_f(&DMatrix::zeros(2, 3), false).is_err());
    }
}
