//! Minibatch ELBO and its gradient.

use nalgebra::{DMatrix, DVector};

use super::{Likelihood, SvgpData, SvgpPosterior};
use crate::error::{Error, Result};
use crate::kernels::KernelParams;
use crate::linalg::{keep_lower, lower_triangular_inverse, phi_lower, sigmoid, softplus, symmetrize};
use crate::quadrature::GaussHermite;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Below this latent variance the Bernoulli variance derivative switches to
/// the second-derivative form, which stays finite at zero variance.
const TINY_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub struct ElboParts {
    pub value: f64,
    /// Minibatch-scaled expected log-likelihood.
    pub expected_loglik: f64,
    pub kl: f64,
}

/// Gradient of the ELBO (ascent direction) with respect to every parameter.
#[derive(Debug, Clone)]
pub struct SvgpGrad {
    pub q_mean: DVector<f64>,
    pub q_sqrt: DMatrix<f64>,
    pub log_variance: f64,
    pub log_lengthscales: DVector<f64>,
    pub log_noise: f64,
    pub inducing: Option<DMatrix<f64>>,
    pub points: Option<DMatrix<f64>>,
}

/// Per-point expected log-likelihood `E_q[log p(y|f)]` and its derivatives
/// with respect to the latent mean, latent variance and log noise variance.
pub(crate) struct PointTerms {
    pub value: f64,
    pub d_mean: f64,
    pub d_var: f64,
    pub d_log_noise: f64,
}

fn bernoulli_log_prob(y: f64, f: f64) -> (f64, f64, f64) {
    let sign = 2.0 * y - 1.0;
    let value = -softplus(-sign * f);
    let d1 = sign * sigmoid(-sign * f);
    let p = sigmoid(f);
    (value, d1, -p * (1.0 - p))
}

pub(crate) fn point_terms(lik: &Likelihood, y: f64, mean: f64, var: f64, gh: &GaussHermite) -> PointTerms {
    match *lik {
        Likelihood::Gaussian { noise_var } => {
            let r2 = (y - mean).powi(2) + var;
            PointTerms {
                value: -0.5 * (LN_2PI + noise_var.ln()) - r2 / (2.0 * noise_var),
                d_mean: (y - mean) / noise_var,
                d_var: -0.5 / noise_var,
                d_log_noise: -0.5 + r2 / (2.0 * noise_var),
            }
        }
        Likelihood::Bernoulli => {
            let var = var.max(0.0);
            let scale = (2.0 * var).sqrt();
            let norm = std::f64::consts::PI.sqrt().recip();
            let (mut value, mut d_mean, mut d_var, mut d2_sum) = (0.0, 0.0, 0.0, 0.0);
            for (t, w) in gh.nodes.iter().zip(&gh.weights) {
                let w = w * norm;
                let (v, d1, d2) = bernoulli_log_prob(y, mean + scale * t);
                value += w * v;
                d_mean += w * d1;
                if var > TINY_VARIANCE {
                    d_var += w * d1 * t / scale;
                }
                d2_sum += w * d2;
            }
            if var <= TINY_VARIANCE {
                d_var = 0.5 * d2_sum;
            }
            PointTerms {
                value,
                d_mean,
                d_var,
                d_log_noise: 0.0,
            }
        }
    }
}

pub(crate) struct GradRequest {
    pub points: bool,
    pub inducing: bool,
}

fn check_batch(post: &SvgpPosterior, x: &DMatrix<f64>, y: &DVector<f64>, total_n: usize) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::Empty("ELBO minibatch"));
    }
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    if x.ncols() != post.kernel.dim() {
        return Err(Error::DimensionMismatch {
            expected: post.kernel.dim(),
            got: x.ncols(),
        });
    }
    if total_n < x.nrows() {
        return Err(Error::InvalidArgument(format!(
            "total size {total_n} smaller than minibatch {}",
            x.nrows()
        )));
    }
    if matches!(post.likelihood, Likelihood::Bernoulli) && y.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::InvalidArgument("Bernoulli targets must be 0 or 1".into()));
    }
    Ok(())
}

/// Minibatch ELBO `(total_n / |batch|) Σ E_q[log p(y_i|f_i)] − KL(q(u) || p(u))`.
pub fn elbo(
    post: &SvgpPosterior,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    total_n: usize,
    quadrature_order: usize,
) -> Result<ElboParts> {
    let gh = GaussHermite::new(quadrature_order)?;
    check_batch(post, x, y, total_n)?;
    let chol = post.kuu_cholesky()?;
    let a = chol
        .l_dirty()
        .solve_lower_triangular(&post.kernel.kernel_matrix(&post.inducing, x)?)
        .ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?;
    let mean = a.tr_mul(&post.q_mean);
    let lsa = post.q_sqrt.transpose() * &a;
    let scale = total_n as f64 / x.nrows() as f64;
    let mut sum = 0.0;
    for i in 0..x.nrows() {
        let var = post.kernel.variance - a.column(i).norm_squared() + lsa.column(i).norm_squared();
        sum += point_terms(&post.likelihood, y[i], mean[i], var, &gh).value;
    }
    let kl = post.kl();
    Ok(ElboParts {
        value: scale * sum - kl,
        expected_loglik: scale * sum,
        kl,
    })
}

/// ELBO over a whole dataset, evaluated without minibatch scaling.
pub fn elbo_full(post: &SvgpPosterior, data: &SvgpData, quadrature_order: usize) -> Result<ElboParts> {
    data.check()?;
    let x = post.resolve(&data.inputs)?;
    elbo(post, &x, &data.targets, data.len(), quadrature_order)
}

/// ELBO together with its gradient with respect to every parameter, including
/// the inducing inputs and the batch points.
pub fn elbo_gradient(
    post: &SvgpPosterior,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    total_n: usize,
    quadrature_order: usize,
) -> Result<(ElboParts, SvgpGrad)> {
    let gh = GaussHermite::new(quadrature_order)?;
    let want = GradRequest {
        points: true,
        inducing: true,
    };
    elbo_with_grad(post, x, y, total_n, &gh, &want)
}

pub(crate) fn elbo_with_grad(
    post: &SvgpPosterior,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    total_n: usize,
    gh: &GaussHermite,
    want: &GradRequest,
) -> Result<(ElboParts, SvgpGrad)> {
    check_batch(post, x, y, total_n)?;
    let kernel: &KernelParams = &post.kernel;
    let (c, b) = (post.num_inducing(), x.nrows());
    let chol = post.kuu_cholesky()?;
    let linv = lower_triangular_inverse(&chol.l());
    let kuf = kernel.kernel_matrix(&post.inducing, x)?;
    let a = &linv * &kuf;
    let mean = a.tr_mul(&post.q_mean);
    let lsa = post.q_sqrt.transpose() * &a;
    let scale = total_n as f64 / b as f64;

    let mut value = 0.0;
    let mut g = DVector::<f64>::zeros(b);
    let mut h = DVector::<f64>::zeros(b);
    let mut d_log_noise = 0.0;
    for i in 0..b {
        let var = kernel.variance - a.column(i).norm_squared() + lsa.column(i).norm_squared();
        let t = point_terms(&post.likelihood, y[i], mean[i], var, gh);
        value += t.value;
        g[i] = t.d_mean;
        h[i] = t.d_var;
        d_log_noise += t.d_log_noise;
    }
    let kl = post.kl();
    let parts = ElboParts {
        value: scale * value - kl,
        expected_loglik: scale * value,
        kl,
    };

    let q_mean_grad = scale * (&a * &g) - &post.q_mean;

    let mut ah = a.clone();
    for (i, mut col) in ah.column_iter_mut().enumerate() {
        col *= h[i];
    }
    let mut q_sqrt_grad = (2.0 * scale) * (&ah * lsa.transpose());
    keep_lower(&mut q_sqrt_grad);
    q_sqrt_grad -= &post.q_sqrt;
    for j in 0..c {
        q_sqrt_grad[(j, j)] += 1.0 / post.q_sqrt[(j, j)];
    }

    // Gradient with respect to A = L⁻¹ K_uf.
    let mut a_bar = &post.q_sqrt * &lsa - &a;
    for (i, mut col) in a_bar.column_iter_mut().enumerate() {
        col *= 2.0 * h[i];
    }
    a_bar += &post.q_mean * g.transpose();
    a_bar *= scale;

    let kuf_bar = linv.transpose() * &a_bar;
    let mut kuu_bar = -(linv.transpose() * phi_lower(&(&a_bar * a.transpose())) * &linv);
    symmetrize(&mut kuu_bar);

    let g_uf = kernel.weighted_grads(&post.inducing, x, &kuf_bar, want.inducing, want.points);
    let g_uu = kernel.weighted_grads(&post.inducing, &post.inducing, &kuu_bar, want.inducing, want.inducing);
    let diag_term = scale * h.sum() * kernel.variance;
    let jitter_term = kernel.jitter() * kuu_bar.trace();

    let inducing = if want.inducing {
        let mut gz = g_uf.x1.expect("requested");
        gz += g_uu.x1.expect("requested");
        gz += g_uu.x2.expect("requested");
        Some(gz)
    } else {
        None
    };
    let grad = SvgpGrad {
        q_mean: q_mean_grad,
        q_sqrt: q_sqrt_grad,
        log_variance: g_uf.log_variance + g_uu.log_variance + diag_term + jitter_term,
        log_lengthscales: g_uf.log_lengthscales + g_uu.log_lengthscales,
        log_noise: scale * d_log_noise,
        inducing,
        points: g_uf.x2,
    };
    Ok((parts, grad))
}
