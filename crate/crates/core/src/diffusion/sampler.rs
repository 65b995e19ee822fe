use std::sync::Arc;

use rayon::prelude::*;

use super::denoiser::{Condition, Denoiser, PolicyParams};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::{self, StreamRng};

/// Full record of one reverse-diffusion rollout.
///
/// Index `k` of the per-step vectors is the step `t = T - k`, i.e. the
/// transition `states[k] = x_t -> states[k + 1] = x_{t-1}`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub cond: Arc<Condition>,
    pub init_noise: Vec<f64>,
    /// `x_T, ..., x_0` (unclamped).
    pub states: Vec<Vec<f64>>,
    pub step_noises: Vec<Vec<f64>>,
    pub step_means: Vec<Vec<f64>>,
    pub step_sigmas: Vec<f64>,
    /// `x_0` clamped to `[0, 1]`.
    pub final_image: ImageTensor,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.step_sigmas.len()
    }

    fn index(&self, t: usize) -> usize {
        self.steps() - t
    }

    /// `x_t`, the input of step `t`.
    pub fn state_before(&self, t: usize) -> &[f64] {
        &self.states[self.index(t)]
    }

    /// `x_{t-1}`, the realized output of step `t`.
    pub fn state_after(&self, t: usize) -> &[f64] {
        &self.states[self.index(t) + 1]
    }

    /// Mean predicted at step `t` by the parameters that generated the rollout.
    pub fn mean_at(&self, t: usize) -> &[f64] {
        &self.step_means[self.index(t)]
    }

    pub fn sigma_at(&self, t: usize) -> f64 {
        self.step_sigmas[self.index(t)]
    }
}

/// Which reverse steps enter likelihood ratios and the KL anchor: every
/// `stride`-th step counted from `t = 1`, so the final step is always kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepSelection {
    pub stride: usize,
}

impl Default for StepSelection {
    fn default() -> Self {
        Self { stride: 1 }
    }
}

impl StepSelection {
    pub fn all() -> Self {
        Self::default()
    }

    /// Selected steps in sampling order (descending `t`). Fails if any of
    /// them has zero sampling variance.
    pub fn steps(&self, sched: &NoiseSchedule) -> Result<Vec<usize>> {
        if self.stride == 0 {
            return Err(Error::Config("step stride must be at least 1".into()));
        }
        let steps: Vec<usize> = (1..=sched.steps())
            .rev()
            .filter(|t| (t - 1) % self.stride == 0)
            .collect();
        if let Some(&t) = steps.iter().find(|&&t| sched.sigma(t) <= 0.0) {
            return Err(Error::ZeroVariance { step: t });
        }
        Ok(steps)
    }
}

/// How a rollout draws its noise.
pub enum NoiseMode<'a> {
    Stochastic(&'a mut StreamRng),
    /// All noises zero: the mean path from `sqrt(alpha_bar_T) * cond`.
    Deterministic,
}

fn step_with_mean(
    den: &Denoiser,
    params: &PolicyParams,
    sched: &NoiseSchedule,
    cond: &Condition,
    x_t: &[f64],
    t: usize,
    eps: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if eps.len() != x_t.len() {
        return Err(Error::dim(format!("noise {} vs state {}", eps.len(), x_t.len())));
    }
    let mu = den.predict_mean(params, sched, cond, x_t, t)?;
    let sigma = sched.sigma(t);
    let next = mu.iter().zip(eps).map(|(m, e)| m + sigma * e).collect();
    Ok((next, mu))
}

/// `x_{t-1} = mu_theta(x_t, t) + sigma_t * eps`, unclamped.
pub fn reverse_step(
    den: &Denoiser,
    params: &PolicyParams,
    sched: &NoiseSchedule,
    cond: &Condition,
    x_t: &[f64],
    t: usize,
    eps: &[f64],
) -> Result<Vec<f64>> {
    step_with_mean(den, params, sched, cond, x_t, t, eps).map(|(x, _)| x)
}

/// One rollout from the perturbed start
/// `x_T = sqrt(alpha_bar_T) * cond + sqrt(1 - alpha_bar_T) * eps_init`.
pub fn rollout(
    den: &Denoiser,
    params: &PolicyParams,
    sched: &NoiseSchedule,
    cond: Arc<Condition>,
    mut noise: NoiseMode<'_>,
) -> Result<Trajectory> {
    let dim = cond.state_dim();
    let draw = |noise: &mut NoiseMode<'_>| match noise {
        NoiseMode::Stochastic(rng) => rng::normal_vec(rng, dim),
        NoiseMode::Deterministic => vec![0.0; dim],
    };
    let steps = sched.steps();
    let init_noise = draw(&mut noise);
    let ab = sched.alpha_bar(steps);
    let x_start: Vec<f64> = cond
        .image()
        .data()
        .iter()
        .zip(&init_noise)
        .map(|(c, e)| ab.sqrt() * c + (1.0 - ab).sqrt() * e)
        .collect();

    let mut states = Vec::with_capacity(steps + 1);
    let mut step_noises = Vec::with_capacity(steps);
    let mut step_means = Vec::with_capacity(steps);
    let mut step_sigmas = Vec::with_capacity(steps);
    states.push(x_start);
    for t in (1..=steps).rev() {
        let eps = draw(&mut noise);
        let x_t = states.last().expect("non-empty");
        let (next, mu) = step_with_mean(den, params, sched, &cond, x_t, t, &eps)?;
        states.push(next);
        step_noises.push(eps);
        step_means.push(mu);
        step_sigmas.push(sched.sigma(t));
    }
    let img = cond.image();
    let final_image =
        ImageTensor::from_clamped(img.height(), img.width(), states[steps].clone())?;
    Ok(Trajectory { cond, init_noise, states, step_noises, step_means, step_sigmas, final_image })
}

/// `g` independent rollouts for one condition. Member `i` draws from the
/// stream `(seed, i)`, so the group is a pure function of its inputs.
pub fn sample_group(
    den: &Denoiser,
    params: &PolicyParams,
    sched: &NoiseSchedule,
    cond: Arc<Condition>,
    g: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if g < 2 {
        return Err(Error::Config(format!("group size {g} < 2")));
    }
    (0..g)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, &[rng::TAG_ROLLOUT, i as u64]);
            rollout(den, params, sched, cond.clone(), NoiseMode::Stochastic(&mut rng))
        })
        .collect()
}

/// Re-runs the recorded noises under `params` and returns the states.
pub fn replay(
    den: &Denoiser,
    params: &PolicyParams,
    sched: &NoiseSchedule,
    traj: &Trajectory,
) -> Result<Vec<Vec<f64>>> {
    let mut states = vec![traj.states[0].clone()];
    for (k, t) in (1..=traj.steps()).rev().enumerate() {
        let next = reverse_step(
            den,
            params,
            sched,
            &traj.cond,
            &states[k],
            t,
            &traj.step_noises[k],
        )?;
        states.push(next);
    }
    Ok(states)
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `sum_t -||x_{t-1} - mu_theta(x_t, t)||^2 / (2 sigma_t^2)` over the selected
/// steps, dropping the parameter-independent Gaussian normalizer.
pub fn trajectory_log_density(
    den: &Denoiser,
    params: &PolicyParams,
    sched: &NoiseSchedule,
    traj: &Trajectory,
    selection: StepSelection,
) -> Result<f64> {
    if traj.steps() != sched.steps() {
        return Err(Error::dim("trajectory length does not match the schedule"));
    }
    let mut total = 0.0;
    for t in selection.steps(sched)? {
        let mu = den.predict_mean(params, sched, &traj.cond, traj.state_before(t), t)?;
        let s = sched.sigma(t);
        total -= sq_dist(traj.state_after(t), &mu) / (2.0 * s * s);
    }
    Ok(total)
}
