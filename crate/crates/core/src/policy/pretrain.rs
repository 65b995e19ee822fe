//! Supervised cold start: regress the predicted step mean onto the true
//! posterior mean `a_t * x0 + b_t * x_t` at a uniformly drawn step.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{Optimizer, OptimizerKind};
use crate::diffusion::{forward_noise, Condition, Denoiser, NoiseSchedule, PolicyParams};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::{self, StreamRng};

/// A smoky condition with its clean target.
#[derive(Debug, Clone)]
pub struct PretrainSample {
    pub cond: Arc<Condition>,
    pub clean: ImageTensor,
}

impl PretrainSample {
    pub fn new(smoky: &ImageTensor, clean: &ImageTensor, radius: usize) -> Result<Self> {
        if !smoky.same_shape(clean) {
            return Err(Error::Dimension("smoky and clean images differ in shape".into()));
        }
        Ok(Self { cond: Arc::new(Condition::new(smoky, radius)), clean: clean.clone() })
    }
}

/// Mean squared error of the step mean at `(t, eps)` and its gradient.
pub fn pretrain_loss_and_grad(
    den: &Denoiser,
    sched: &NoiseSchedule,
    params: &PolicyParams,
    sample: &PretrainSample,
    t: usize,
    eps: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let x0 = sample.clean.data();
    let x_t = forward_noise(x0, t, eps, sched)?;
    let (a, b) = sched.posterior_coefs(t);
    let (mu, cache) = den.forward(params, sched, &sample.cond, &x_t, t)?;
    let n = mu.len() as f64;
    let mut loss = 0.0;
    let mut gm = vec![0.0; mu.len()];
    for i in 0..mu.len() {
        let r = mu[i] - (a * x0[i] + b * x_t[i]);
        loss += r * r / n;
        gm[i] = 2.0 * r / n;
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("pretraining loss is not finite".into()));
    }
    let mut grad = vec![0.0; den.param_count()];
    den.backward(params, &sample.cond, &cache, &gm, &mut grad)?;
    Ok((loss, grad))
}

/// One optimizer step on the mean loss over `batch`; each sample draws its
/// own step and noise from `rng`. Returns the pre-update loss.
pub fn pretrain_step(
    den: &Denoiser,
    sched: &NoiseSchedule,
    params: &mut PolicyParams,
    opt: &mut Optimizer,
    batch: &[&PretrainSample],
    rng: &mut StreamRng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Domain("empty pretraining batch".into()));
    }
    let draws: Vec<(usize, Vec<f64>)> = batch
        .iter()
        .map(|s| {
            let t = rng.random_range(1..=sched.steps());
            (t, rng::normal_vec(rng, s.cond.state_dim()))
        })
        .collect();
    let parts = batch
        .par_iter()
        .zip(draws.par_iter())
        .map(|(s, (t, eps))| pretrain_loss_and_grad(den, sched, params, s, *t, eps))
        .collect::<Result<Vec<_>>>()?;
    let k = batch.len() as f64;
    let mut grad = vec![0.0; den.param_count()];
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l / k;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b / k;
        }
    }
    opt.descend(params, &grad)?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 500, lr: 3e-3, batch_size: 8, seed: 0, optimizer: OptimizerKind::default() }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("pretraining batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("pretraining lr {} must be positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainLog {
    /// `(global step, loss)` for each step run.
    pub losses: Vec<(u64, f64)>,
}

/// Runs global steps `start .. cfg.steps`. Step `s` draws its batch and noise
/// from the stream `(seed, s)` alone, so a resumed run continues the same
/// curve.
pub fn pretrain(
    den: &Denoiser,
    sched: &NoiseSchedule,
    params: &mut PolicyParams,
    opt: &mut Optimizer,
    samples: &[PretrainSample],
    cfg: &PretrainConfig,
    start: u64,
) -> Result<PretrainLog> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Domain("pretraining needs at least one pair".into()));
    }
    let mut log = PretrainLog::default();
    for step in start..cfg.steps as u64 {
        let mut rng = rng::stream(cfg.seed, &[rng::TAG_PRETRAIN, step]);
        let batch: Vec<&PretrainSample> = (0..cfg.batch_size.min(samples.len()))
            .map(|_| &samples[rng.random_range(0..samples.len())])
            .collect();
        let loss = pretrain_step(den, sched, params, opt, &batch, &mut rng)?;
        log.losses.push((step, loss));
    }
    Ok(log)
}
