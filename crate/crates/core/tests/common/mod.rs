//! Helpers shared by the integration test targets.

use aoe::kernels::{KernelFamily, KernelParams};
use aoe::linalg::keep_lower;
use aoe::svgp::{elbo, elbo_gradient, Likelihood, SvgpPosterior};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_instance(rng: &mut ChaCha8Rng, lik: Likelihood) -> (SvgpPosterior, DMatrix<f64>, DVector<f64>) {
    let (n, c) = (12, 5);
    let x = DMatrix::<f64>::from_fn(n, 2, |_, _| rng.random_range(-2.0..2.0));
    let y = match lik {
        Likelihood::Gaussian { .. } => DVector::from_fn(n, |i, _| x[(i, 0)].sin() - 0.4 * x[(i, 1)]),
        Likelihood::Bernoulli => DVector::from_fn(n, |_, _| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 }),
    };
    let z = DMatrix::from_fn(c, 2, |_, _| rng.random_range(-2.0..2.0));
    let family = [KernelFamily::Rbf, KernelFamily::Matern32, KernelFamily::Matern52][rng.random_range(0..3)];
    let k = KernelParams::new(family, rng.random_range(0.5..2.0), vec![rng.random_range(0.6..1.5), rng.random_range(0.6..1.5)]).unwrap();
    let mut post = SvgpPosterior::from_prior(z, k, lik, None).unwrap();
    post.q_mean = DVector::from_fn(c, |_, _| rng.random_range(-1.0..1.0));
    let mut ls = DMatrix::from_fn(c, c, |_, _| rng.random_range(-0.3..0.3));
    keep_lower(&mut ls);
    for j in 0..c {
        ls[(j, j)] = rng.random_range(0.3..1.0);
    }
    post.q_sqrt = ls;
    (post, x, y)
}

pub fn rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / scale.max(1e-8)
}

/// Central differences of the ELBO over each parameter group, compared with
/// the analytic gradient as a norm-wise relative error. Returns the worst
/// group and its error.
pub fn worst_gradient_error(post: &SvgpPosterior, x: &DMatrix<f64>, y: &DVector<f64>, h: f64) -> (&'static str, f64) {
    let mut worst = ("none", 0.0);
    let mut record = |group: &'static str, e: f64| {
        if e > worst.1 || e.is_nan() {
            worst = (group, e);
        }
    };
    let total = 30;
    let f = |p: &SvgpPosterior, x: &DMatrix<f64>| elbo(p, x, y, total, 20).unwrap().value;
    let (_, g) = elbo_gradient(post, x, y, total, 20).unwrap();
    let c = post.num_inducing();

    let fd_of = |apply: &dyn Fn(&mut SvgpPosterior, &mut DMatrix<f64>, f64)| {
        let mut pp = post.clone();
        let mut xp = x.clone();
        apply(&mut pp, &mut xp, h);
        let mut pm = post.clone();
        let mut xm = x.clone();
        apply(&mut pm, &mut xm, -h);
        (f(&pp, &xp) - f(&pm, &xm)) / (2.0 * h)
    };

    let fd: Vec<f64> = (0..c).map(|i| fd_of(&|p, _, d| p.q_mean[i] += d)).collect();
    record("q_mean", rel_err(g.q_mean.as_slice(), &fd));

    let mut an = Vec::new();
    let mut fd = Vec::new();
    for j in 0..c {
        for i in j..c {
            an.push(g.q_sqrt[(i, j)]);
            fd.push(fd_of(&|p, _, d| p.q_sqrt[(i, j)] += d));
        }
    }
    record("q_sqrt", rel_err(&an, &fd));

    let fd = fd_of(&|p, _, d| p.kernel.variance *= d.exp());
    record("log variance", rel_err(&[g.log_variance], &[fd]));

    let fd: Vec<f64> = (0..2).map(|k| fd_of(&|p, _, d| p.kernel.lengthscales[k] *= d.exp())).collect();
    record("log lengthscale", rel_err(g.log_lengthscales.as_slice(), &fd));

    if let Likelihood::Gaussian { .. } = post.likelihood {
        let fd = fd_of(&|p, _, d| {
            if let Likelihood::Gaussian { noise_var } = p.likelihood {
                p.likelihood = Likelihood::Gaussian { noise_var: noise_var * d.exp() };
            }
        });
        record("log noise", rel_err(&[g.log_noise], &[fd]));
    }

    let gz = g.inducing.as_ref().unwrap();
    let mut an = Vec::new();
    let mut fd = Vec::new();
    for i in 0..c {
        for d in 0..2 {
            an.push(gz[(i, d)]);
            fd.push(fd_of(&|p, _, s| p.inducing[(i, d)] += s));
        }
    }
    record("inducing", rel_err(&an, &fd));

    let gx = g.points.as_ref().unwrap();
    let mut an = Vec::new();
    let mut fd = Vec::new();
    for i in 0..x.nrows() {
        for d in 0..2 {
            an.push(gx[(i, d)]);
            fd.push(fd_of(&|_, xx, s| xx[(i, d)] += s));
        }
    }
    record("point", rel_err(&an, &fd));
    worst
}
