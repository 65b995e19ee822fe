//! Two-layer pixel-shared denoiser with an analytic backward pass.
//!
//! For each pixel the network sees the noisy RGB value, the conditioning
//! image's RGB neighborhood, and a block of per-call inputs shared by every
//! pixel (conditioning image channel means, a sinusoidal time embedding and
//! the concept vector):
//!
//! ```text
//! h      = tanh(W1 [pixel inputs; shared inputs] + b1)
//! x0_hat = cond_pixel + W2 h + b2
//! mu     = a_t * x0_hat + b_t * x_t
//! ```
//!
//! `(a_t, b_t)` are the schedule's posterior-mean coefficients, so the model
//! returns the Gaussian step mean directly while its learnable part is a
//! residual correction to the smoky input.

use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::error::{ensure_finite, Error, Result};
use crate::image::{ImageTensor, CHANNELS};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    /// Must be even.
    pub time_dim: usize,
    pub concept_dim: usize,
    /// Neighborhood radius on the conditioning image (1 means 3x3).
    pub radius: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: 32, time_dim: 8, concept_dim: 64, radius: 1, init_seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::Config(format!("time_dim {} must be even", self.time_dim)));
        }
        Ok(())
    }
}

/// Flat parameter vector `[W1 | b1 | W2 | b2]`, row-major weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams(pub Vec<f64>);

impl PolicyParams {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Conditioning image with its per-pixel neighborhood features precomputed.
#[derive(Debug, Clone)]
pub struct Condition {
    image: ImageTensor,
    radius: usize,
    neighborhood: Vec<f64>,
    means: [f64; 3],
}

impl Condition {
    pub fn new(image: &ImageTensor, radius: usize) -> Self {
        let (h, w) = (image.height(), image.width());
        let r = radius as isize;
        let side = 2 * radius + 1;
        let mut neighborhood = Vec::with_capacity(h * w * side * side * CHANNELS);
        for y in 0..h as isize {
            for x in 0..w as isize {
                for dy in -r..=r {
                    let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -r..=r {
                        let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                        for c in 0..CHANNELS {
                            neighborhood.push(image.get(yy, xx, c) - 0.5);
                        }
                    }
                }
            }
        }
        let mu = crate::image::channel_stats(image).mu;
        Self {
            image: image.clone(),
            radius,
            neighborhood,
            means: mu.map(|m| m - 0.5),
        }
    }

    pub fn image(&self) -> &ImageTensor {
        &self.image
    }

    pub fn state_dim(&self) -> usize {
        self.image.data().len()
    }
}

/// Intermediates kept by the forward pass for [`Denoiser::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x_t: Vec<f64>,
    shared: Vec<f64>,
    hidden: Vec<f64>,
    a_t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: ModelConfig,
    concept: Vec<f64>,
    n_pix: usize,
    n_shared: usize,
}

impl Denoiser {
    /// `concept` is the fixed conditioning vector; `None` means zeros.
    pub fn new(config: ModelConfig, concept: Option<Vec<f64>>) -> Result<Self> {
        config.validate()?;
        let concept = concept.unwrap_or_else(|| vec![0.0; config.concept_dim]);
        if concept.len() != config.concept_dim {
            return Err(Error::dim(format!(
                "concept vector has {} entries, model expects {}",
                concept.len(),
                config.concept_dim
            )));
        }
        ensure_finite("concept vector", &concept)?;
        let side = 2 * config.radius + 1;
        let n_pix = CHANNELS + CHANNELS * side * side;
        let n_shared = CHANNELS + config.time_dim + config.concept_dim;
        Ok(Self { config, concept, n_pix, n_shared })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn concept(&self) -> &[f64] {
        &self.concept
    }

    fn n_in(&self) -> usize {
        self.n_pix + self.n_shared
    }

    fn b1_offset(&self) -> usize {
        self.config.hidden * self.n_in()
    }

    fn w2_offset(&self) -> usize {
        self.b1_offset() + self.config.hidden
    }

    /// Offset of the output bias `b2` (three entries, one per channel).
    pub fn b2_offset(&self) -> usize {
        self.w2_offset() + CHANNELS * self.config.hidden
    }

    pub fn param_count(&self) -> usize {
        self.b2_offset() + CHANNELS
    }

    /// Gaussian hidden weights scaled by fan-in; small output weights so the
    /// initial model stays close to returning the conditioning image.
    pub fn init_params(&self) -> PolicyParams {
        let mut rng = rng::stream(self.config.init_seed, &[rng::TAG_INIT]);
        let mut p = rng::normal_vec(&mut rng, self.param_count());
        let s1 = 1.0 / (self.n_in() as f64).sqrt();
        for v in &mut p[..self.b1_offset()] {
            *v *= s1;
        }
        for v in &mut p[self.b1_offset()..self.w2_offset()] {
            *v = 0.0;
        }
        for v in &mut p[self.w2_offset()..self.b2_offset()] {
            *v *= 0.01;
        }
        for v in &mut p[self.b2_offset()..] {
            *v = 0.0;
        }
        PolicyParams(p)
    }

    fn shared_inputs(&self, cond: &Condition, t: usize) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.n_shared);
        z.extend_from_slice(&cond.means);
        let half = self.config.time_dim / 2;
        for k in 0..half {
            let freq = 1.0 / 10000f64.powf(k as f64 / half as f64);
            z.push((t as f64 * freq).sin());
            z.push((t as f64 * freq).cos());
        }
        z.extend_from_slice(&self.concept);
        z
    }

    fn check(&self, params: &PolicyParams, cond: &Condition, x_t: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::dim(format!(
                "parameter vector has {} entries, model expects {}",
                params.len(),
                self.param_count()
            )));
        }
        if cond.radius != self.config.radius {
            return Err(Error::dim("condition built with a different neighborhood radius"));
        }
        if x_t.len() != cond.state_dim() {
            return Err(Error::dim(format!(
                "state has {} entries, condition image has {}",
                x_t.len(),
                cond.state_dim()
            )));
        }
        Ok(())
    }

    /// Predicted step mean `mu_theta(x_t, t)` for the reverse step `t -> t-1`.
    pub fn predict_mean(
        &self,
        params: &PolicyParams,
        sched: &NoiseSchedule,
        cond: &Condition,
        x_t: &[f64],
        t: usize,
    ) -> Result<Vec<f64>> {
        self.forward(params, sched, cond, x_t, t).map(|(mu, _)| mu)
    }

    pub fn forward(
        &self,
        params: &PolicyParams,
        sched: &NoiseSchedule,
        cond: &Condition,
        x_t: &[f64],
        t: usize,
    ) -> Result<(Vec<f64>, ForwardCache)> {
        sched.check_step(t)?;
        self.check(params, cond, x_t)?;
        let p = params.as_slice();
        let hsz = self.config.hidden;
        let n_in = self.n_in();
        let (n_pix, n_nb) = (self.n_pix, self.n_pix - CHANNELS);
        let w1 = &p[..self.b1_offset()];
        let b1 = &p[self.b1_offset()..self.w2_offset()];
        let w2 = &p[self.w2_offset()..self.b2_offset()];
        let b2 = &p[self.b2_offset()..];
        let (a_t, b_t) = sched.posterior_coefs(t);

        let shared = self.shared_inputs(cond, t);
        let base: Vec<f64> = (0..hsz)
            .map(|h| {
                let row = &w1[h * n_in + n_pix..(h + 1) * n_in];
                b1[h] + row.iter().zip(&shared).map(|(w, z)| w * z).sum::<f64>()
            })
            .collect();

        let n_pixels = cond.image.pixel_count();
        let cimg = cond.image.data();
        let mut hidden = vec![0.0; n_pixels * hsz];
        let mut mu = vec![0.0; n_pixels * CHANNELS];
        for px in 0..n_pixels {
            let xs = &x_t[px * CHANNELS..(px + 1) * CHANNELS];
            let nb = &cond.neighborhood[px * n_nb..(px + 1) * n_nb];
            let hid = &mut hidden[px * hsz..(px + 1) * hsz];
            for h in 0..hsz {
                let row = &w1[h * n_in..h * n_in + n_pix];
                let mut acc = base[h];
                for c in 0..CHANNELS {
                    acc += row[c] * xs[c];
                }
                for (w, u) in row[CHANNELS..].iter().zip(nb) {
                    acc += w * u;
                }
                hid[h] = acc.tanh();
            }
            for c in 0..CHANNELS {
                let row = &w2[c * hsz..(c + 1) * hsz];
                let r = b2[c] + row.iter().zip(hid.iter()).map(|(w, v)| w * v).sum::<f64>();
                let i = px * CHANNELS + c;
                mu[i] = a_t * (cimg[i] + r) + b_t * xs[c];
            }
        }
        ensure_finite("denoiser output", &mu)?;
        Ok((mu, ForwardCache { x_t: x_t.to_vec(), shared, hidden, a_t }))
    }

    /// Accumulates `d(sum_i grad_mean[i] * mu[i]) / d params` into `grad`.
    pub fn backward(
        &self,
        params: &PolicyParams,
        cond: &Condition,
        cache: &ForwardCache,
        grad_mean: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        if grad_mean.len() != cache.x_t.len() || grad.len() != self.param_count() {
            return Err(Error::dim("backward: gradient buffer size mismatch"));
        }
        ensure_finite("upstream gradient", grad_mean)?;
        let p = params.as_slice();
        let hsz = self.config.hidden;
        let n_in = self.n_in();
        let (n_pix, n_nb) = (self.n_pix, self.n_pix - CHANNELS);
        let (b1o, w2o, b2o) = (self.b1_offset(), self.w2_offset(), self.b2_offset());
        let w2 = &p[w2o..b2o];

        let mut pre_sum = vec![0.0; hsz];
        let mut dpre = vec![0.0; hsz];
        let n_pixels = cond.image.pixel_count();
        for px in 0..n_pixels {
            let hid = &cache.hidden[px * hsz..(px + 1) * hsz];
            let gr: [f64; 3] =
                std::array::from_fn(|c| cache.a_t * grad_mean[px * CHANNELS + c]);
            if gr.iter().all(|&g| g == 0.0) {
                continue;
            }
            for c in 0..CHANNELS {
                grad[b2o + c] += gr[c];
                let gw2 = &mut grad[w2o + c * hsz..w2o + (c + 1) * hsz];
                for (g, v) in gw2.iter_mut().zip(hid) {
                    *g += gr[c] * v;
                }
            }
            for h in 0..hsz {
                let dh: f64 = (0..CHANNELS).map(|c| w2[c * hsz + h] * gr[c]).sum();
                dpre[h] = dh * (1.0 - hid[h] * hid[h]);
                pre_sum[h] += dpre[h];
            }
            let xs = &cache.x_t[px * CHANNELS..(px + 1) * CHANNELS];
            let nb = &cond.neighborhood[px * n_nb..(px + 1) * n_nb];
            for h in 0..hsz {
                let d = dpre[h];
                let row = &mut grad[h * n_in..h * n_in + n_pix];
                for c in 0..CHANNELS {
                    row[c] += d * xs[c];
                }
                for (g, u) in row[CHANNELS..].iter_mut().zip(nb) {
                    *g += d * u;
                }
            }
        }
        for h in 0..hsz {
            grad[b1o + h] += pre_sum[h];
            let row = &mut grad[h * n_in + n_pix..(h + 1) * n_in];
            for (g, z) in row.iter_mut().zip(&cache.shared) {
                *g += pre_sum[h] * z;
            }
        }
        Ok(())
    }

    /// Forward pass plus the parameter gradient of `<grad_mean, mu>`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_and_grad(
        &self,
        params: &PolicyParams,
        sched: &NoiseSchedule,
        cond: &Condition,
        x_t: &[f64],
        t: usize,
        grad_mean: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let (mu, cache) = self.forward(params, sched, cond, x_t, t)?;
        let mut grad = vec![0.0; self.param_count()];
        self.backward(params, cond, &cache, grad_mean, &mut grad)?;
        ensure_finite("parameter gradient", &grad)?;
        Ok((mu, grad))
    }
}
