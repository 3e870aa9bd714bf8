mod common;

use common::{random_instance, worst_gradient_error};
use aoe::gp_exact::fit_exact;
use aoe::kernels::{KernelFamily, KernelParams};
use aoe::svgp::{elbo, train_svgp, Likelihood, SvgpData, SvgpPosterior, TrainConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn gaussian_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..10 {
        let (post, x, y) = random_instance(&mut rng, Likelihood::Gaussian { noise_var: 0.3 });
        let (group, e) = worst_gradient_error(&post, &x, &y, 1e-4);
        assert!(e < 1e-3, "{group} rel err {e}");
    }
}

#[test]
fn bernoulli_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    for _ in 0..10 {
        let (post, x, y) = random_instance(&mut rng, Likelihood::Bernoulli);
        let (group, e) = worst_gradient_error(&post, &x, &y, 1e-4);
        assert!(e < 5e-3, "{group} rel err {e}");
    }
}

fn sine_toy() -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = DMatrix::<f64>::from_fn(20, 1, |i, _| -3.0 + 6.0 * i as f64 / 19.0);
    let y = DVector::from_fn(20, |i, _| x[(i, 0)].sin() + 0.1 * rng.random_range(-1.0..1.0));
    (x, y)
}

fn toy_config() -> TrainConfig {
    TrainConfig {
        epochs: 3000,
        batch_size: 20,
        learning_rate: 0.02,
        final_lr_fraction: 0.01,
        train_hyperparameters: false,
        ..Default::default()
    }
}

#[test]
fn gaussian_toy_reaches_exact_lml() {
    let (x, y) = sine_toy();
    let k = KernelParams::isotropic(KernelFamily::Rbf, 1.0, 1.0, 1).unwrap();
    let noise = 0.05;
    let init = SvgpPosterior::from_prior(x.clone(), k.clone(), Likelihood::Gaussian { noise_var: noise }, None).unwrap();
    let data = SvgpData::points(x.clone(), y.clone());
    let (post, report) = train_svgp(&data, &init, &toy_config()).unwrap();
    let lml = fit_exact(&x, &y, &k, noise).unwrap().log_marginal_likelihood();
    let final_elbo = elbo(&post, &x, &y, 20, 20).unwrap().value;
    assert!((final_elbo - lml).abs() < 1e-2, "elbo {final_elbo} lml {lml}");
    assert!(final_elbo <= lml + 1e-6);
    assert!(report.final_epoch_elbo >= report.initial_elbo);
}

#[test]
fn training_is_deterministic() {
    let (x, y) = sine_toy();
    let k = KernelParams::isotropic(KernelFamily::Matern32, 1.0, 1.0, 1).unwrap();
    let init = SvgpPosterior::from_prior(x.rows(0, 8).into_owned(), k, Likelihood::Gaussian { noise_var: 0.1 }, None).unwrap();
    let data = SvgpData::points(x, y);
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 7,
        learning_rate: 0.01,
        seed: 42,
        ..Default::default()
    };
    let (a, _) = train_svgp(&data, &init, &cfg).unwrap();
    let (b, _) = train_svgp(&data, &init, &cfg).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
}

#[test]
fn zero_epochs_returns_init() {
    let (x, y) = sine_toy();
    let k = KernelParams::isotropic(KernelFamily::Rbf, 1.0, 1.0, 1).unwrap();
    let init = SvgpPosterior::from_prior(x.clone(), k, Likelihood::Gaussian { noise_var: 0.1 }, None).unwrap();
    let cfg = TrainConfig {
        epochs: 0,
        ..Default::default()
    };
    let (post, report) = train_svgp(&SvgpData::points(x, y), &init, &cfg).unwrap();
    assert_eq!(post, init);
    assert_eq!(report.steps, 0);
}

#[test]
fn bernoulli_toy_improves_elbo() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = DMatrix::<f64>::from_fn(60, 1, |_, _| rng.random_range(-3.0..3.0));
    let y = DVector::from_fn(60, |i, _| if x[(i, 0)] > 0.0 { 1.0 } else { 0.0 });
    let k = KernelParams::isotropic(KernelFamily::Matern32, 1.0, 1.0, 1).unwrap();
    let z = DMatrix::<f64>::from_fn(10, 1, |i, _| -3.0 + 6.0 * i as f64 / 9.0);
    let init = SvgpPosterior::from_prior(z, k, Likelihood::Bernoulli, None).unwrap();
    let cfg = TrainConfig {
        epochs: 100,
        batch_size: 20,
        learning_rate: 0.05,
        stratified: true,
        ..Default::default()
    };
    let (post, report) = train_svgp(&SvgpData::points(x.clone(), y), &init, &cfg).unwrap();
    assert!(report.final_epoch_elbo > report.initial_elbo);
    let (mean, _) = post.predict_marginals(&DMatrix::from_row_slice(2, 1, &[-2.0, 2.0])).unwrap();
    assert!(mean[0] < 0.0 && mean[1] > 0.0);
}

#[test]
fn empty_data_rejected() {
    let k = KernelParams::isotropic(KernelFamily::Rbf, 1.0, 1.0, 1).unwrap();
    let init = SvgpPosterior::from_prior(DMatrix::zeros(2, 1), k, Likelihood::Bernoulli, None).unwrap();
    let data = SvgpData::points(DMatrix::zeros(0, 1), DVector::zeros(0));
    assert!(train_svgp(&data, &init, &TrainConfig::default()).is_err());
}
