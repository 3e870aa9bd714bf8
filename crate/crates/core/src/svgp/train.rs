//! Adam training of the variational parameters, kernel hyperparameters,
//! optional inducing inputs and trainable embeddings.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::elbo::{elbo_with_grad, GradRequest};
use super::{elbo_full, Likelihood, SvgpData, SvgpInputs, SvgpPosterior};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::quadrature::GaussHermite;

/// Bounds on log-scale hyperparameters, keeping the kernel well defined.
const LOG_BOUND: f64 = 10.0;
const MIN_LOG_NOISE: f64 = -13.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate at the last step relative to the first; decays geometrically.
    pub final_lr_fraction: f64,
    pub quadrature_order: usize,
    pub seed: u64,
    /// Keep each minibatch's share of positive targets within one sample of
    /// the global share.
    pub stratified: bool,
    pub train_hyperparameters: bool,
    pub optimize_inducing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 600,
            batch_size: 100,
            learning_rate: 0.001,
            final_lr_fraction: 1.0,
            quadrature_order: 20,
            seed: 0,
            stratified: false,
            train_hyperparameters: true,
            optimize_inducing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("minibatch size must be >= 1".into()));
        }
        if self.quadrature_order < 2 {
            return Err(Error::Config("quadrature order must be >= 2".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.final_lr_fraction > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Full-data ELBO of the initial posterior.
    pub initial_elbo: f64,
    /// Mean minibatch ELBO over the final epoch.
    pub final_epoch_elbo: f64,
    pub steps: usize,
}

struct Layout {
    c: usize,
    dim: usize,
    hyper: bool,
    noise: bool,
    inducing: bool,
    encoder: usize,
}

impl Layout {
    fn new(post: &SvgpPosterior, cfg: &TrainConfig) -> Self {
        Self {
            c: post.num_inducing(),
            dim: post.kernel.dim(),
            hyper: cfg.train_hyperparameters,
            noise: cfg.train_hyperparameters && matches!(post.likelihood, Likelihood::Gaussian { .. }),
            inducing: cfg.optimize_inducing,
            encoder: post.encoder.as_ref().map_or(0, |e| e.n_trainable()),
        }
    }

    fn pack(&self, post: &SvgpPosterior) -> Vec<f64> {
        let mut p = Vec::new();
        p.extend(post.q_mean.iter());
        for j in 0..self.c {
            for i in j..self.c {
                p.push(post.q_sqrt[(i, j)]);
            }
        }
        if self.hyper {
            p.push(post.kernel.variance.ln());
            p.extend(post.kernel.lengthscales.iter().map(|l| l.ln()));
        }
        if self.noise {
            if let Likelihood::Gaussian { noise_var } = post.likelihood {
                p.push(noise_var.ln());
            }
        }
        if self.inducing {
            p.extend(post.inducing.iter());
        }
        if self.encoder > 0 {
            p.extend(post.encoder.as_ref().expect("encoder present").trainable_params());
        }
        p
    }

    fn clamp(&self, p: &mut [f64]) {
        let mut off = self.c + self.c * (self.c + 1) / 2;
        if self.hyper {
            for v in &mut p[off..off + 1 + self.dim] {
                *v = v.clamp(-LOG_BOUND, LOG_BOUND);
            }
            off += 1 + self.dim;
        }
        if self.noise {
            p[off] = p[off].clamp(MIN_LOG_NOISE, LOG_BOUND);
        }
    }

    fn unpack(&self, p: &[f64], post: &mut SvgpPosterior) {
        let c = self.c;
        post.q_mean.copy_from_slice(&p[..c]);
        let mut off = c;
        for j in 0..c {
            for i in j..c {
                post.q_sqrt[(i, j)] = p[off];
                off += 1;
            }
        }
        if self.hyper {
            post.kernel.variance = p[off].exp();
            for d in 0..self.dim {
                post.kernel.lengthscales[d] = p[off + 1 + d].exp();
            }
            off += 1 + self.dim;
        }
        if self.noise {
            post.likelihood = Likelihood::Gaussian { noise_var: p[off].exp() };
            off += 1;
        }
        if self.inducing {
            let n = post.inducing.len();
            post.inducing.as_mut_slice().copy_from_slice(&p[off..off + n]);
            off += n;
        }
        if self.encoder > 0 {
            post.encoder
                .as_mut()
                .expect("encoder present")
                .set_trainable_params(&p[off..off + self.encoder]);
        }
    }
}

/// Minibatches for one epoch. Stratification interleaves positives and
/// negatives so every contiguous chunk keeps the global ratio.
fn epoch_batches(targets: &DVector<f64>, batch: usize, stratified: bool, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let n = targets.len();
    let order: Vec<usize> = if stratified {
        let (mut pos, mut neg): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| targets[i] > 0.5);
        pos.shuffle(rng);
        neg.shuffle(rng);
        let ratio = pos.len() as f64 / n as f64;
        let (mut ip, mut ineg) = (0, 0);
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let due = ((k + 1) as f64 * ratio).round() as usize;
            if ip < pos.len() && (ip < due || ineg == neg.len()) {
                out.push(pos[ip]);
                ip += 1;
            } else {
                out.push(neg[ineg]);
                ineg += 1;
            }
        }
        out
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        idx
    };
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Fit the posterior by Adam on the negative ELBO (plus the standard-normal
/// log-prior of any trainable embeddings). Deterministic given `cfg.seed`.
pub fn train_svgp(data: &SvgpData, init: &SvgpPosterior, cfg: &TrainConfig) -> Result<(SvgpPosterior, TrainReport)> {
    cfg.validate()?;
    data.check()?;
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    init.validate()?;
    if let SvgpInputs::Pairs(_) = data.inputs {
        if init.encoder.is_none() {
            return Err(Error::InvalidArgument("id-pair data needs an encoder".into()));
        }
    }
    let initial_elbo = elbo_full(init, data, cfg.quadrature_order)?.value;
    if cfg.epochs == 0 {
        return Ok((
            init.clone(),
            TrainReport {
                initial_elbo,
                final_epoch_elbo: initial_elbo,
                steps: 0,
            },
        ));
    }

    let gh = GaussHermite::new(cfg.quadrature_order)?;
    let layout = Layout::new(init, cfg);
    let mut post = init.clone();
    let mut params = layout.pack(&post);
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = data.len();
    let batch = cfg.batch_size.min(n);
    let total_steps = cfg.epochs * n.div_ceil(batch);
    let decay = cfg.final_lr_fraction.powf(1.0 / (total_steps.max(2) - 1) as f64);
    let want = GradRequest {
        points: layout.encoder > 0,
        inducing: layout.inducing,
    };

    let mut step = 0;
    let mut epoch_sum = 0.0;
    let mut epoch_count = 0;
    for _ in 0..cfg.epochs {
        epoch_sum = 0.0;
        epoch_count = 0;
        for idx in epoch_batches(&data.targets, batch, cfg.stratified, &mut rng) {
            let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| data.targets[i]));
            let (x, pairs) = match &data.inputs {
                SvgpInputs::Points(all) => (all.select_rows(idx.iter()), None),
                SvgpInputs::Pairs(all) => {
                    let p: Vec<(usize, usize)> = idx.iter().map(|&i| all[i]).collect();
                    (post.encode_pairs(&p)?, Some(p))
                }
            };
            let (parts, grad) = elbo_with_grad(&post, &x, &y, n, &gh, &want)?;
            let mut objective = parts.value;
            let mut flat: Vec<f64> = grad.q_mean.iter().map(|v| -v).collect();
            for j in 0..layout.c {
                for i in j..layout.c {
                    flat.push(-grad.q_sqrt[(i, j)]);
                }
            }
            if layout.hyper {
                flat.push(-grad.log_variance);
                flat.extend(grad.log_lengthscales.iter().map(|v| -v));
            }
            if layout.noise {
                flat.push(-grad.log_noise);
            }
            if let Some(gz) = &grad.inducing {
                flat.extend(gz.iter().map(|v| -v));
            }
            if layout.encoder > 0 {
                let enc = post.encoder.as_ref().expect("encoder present");
                let point_grad = grad.points.as_ref().expect("requested");
                let eg = enc.scatter_grad(pairs.as_deref().unwrap_or(&[]), point_grad)?;
                let current = enc.trainable_params();
                objective -= 0.5 * current.iter().map(|v| v * v).sum::<f64>();
                let mut enc_grad: Vec<f64> = Vec::with_capacity(layout.encoder);
                for g in [eg.input, eg.decision].into_iter().flatten() {
                    enc_grad.extend(g.iter());
                }
                flat.extend(enc_grad.iter().zip(&current).map(|(g, e)| -(g - e)));
            }
            if !objective.is_finite() || flat.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "ELBO {objective} at step {step} (kl {}, expected log-lik {})",
                    parts.kl, parts.expected_loglik
                )));
            }
            epoch_sum += objective;
            epoch_count += 1;
            adam.learning_rate = cfg.learning_rate * decay.powi(step as i32);
            adam.step(&mut params, &flat);
            layout.clamp(&mut params);
            layout.unpack(&params, &mut post);
            step += 1;
        }
    }
    Ok((
        post,
        TrainReport {
            initial_elbo,
            final_epoch_elbo: epoch_sum / epoch_count.max(1) as f64,
            steps: step,
        },
    ))
}
