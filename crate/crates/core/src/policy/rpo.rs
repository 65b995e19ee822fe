//! The refinement loop: snapshot, sample groups, score, standardize within
//! groups, then take clipped-surrogate ascent steps anchored to the frozen
//! reference.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::advantage::{group_advantages, DEFAULT_ADVANTAGE_EPS};
use super::objective::{rpo_gradient, RatioMode, SurrogateConfig};
use super::optim::{Optimizer, OptimizerKind};
use super::reward::{RewardBreakdown, RewardModel, RewardWeights};
use crate::diffusion::{
    sample_group, AdamMoments, Condition, Denoiser, NoiseSchedule, PolicyParams, StepSelection, Trajectory,
};
use crate::error::{Error, Result};
use crate::image::{channel_stats, ImageTensor};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub lambda_kl: f64,
    pub lr: f64,
    pub iterations: usize,
    pub seed: u64,
    pub weights: RewardWeights,
    pub advantage_eps: f64,
    pub inner_epochs: usize,
    /// Ratio and KL use every `stride`-th step counted from `t = 1`.
    pub stride: usize,
    pub ratio_mode: RatioMode,
    pub groups_per_iteration: usize,
    pub optimizer: OptimizerKind,
}

impl Default for RpoConfig {
    fn default() -> Self {
        Self {
            group_size: 4,
            clip_eps: 0.2,
            lambda_kl: 0.01,
            lr: 2e-4,
            iterations: 200,
            seed: 0,
            weights: RewardWeights::default(),
            advantage_eps: DEFAULT_ADVANTAGE_EPS,
            inner_epochs: 1,
            stride: 1,
            ratio_mode: RatioMode::Trajectory,
            groups_per_iteration: 4,
            optimizer: OptimizerKind::default(),
        }
    }
}

impl RpoConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.group_size < 2 {
            return fail(format!("group size {} < 2", self.group_size));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return fail(format!("clip_eps {} outside (0, 1)", self.clip_eps));
        }
        if !(self.lambda_kl >= 0.0 && self.lambda_kl.is_finite()) {
            return fail(format!("lambda_kl {} must be nonnegative", self.lambda_kl));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr {} must be positive", self.lr));
        }
        if !(self.advantage_eps > 0.0) {
            return fail(format!("advantage_eps {} must be positive", self.advantage_eps));
        }
        if self.inner_epochs == 0 || self.stride == 0 || self.groups_per_iteration == 0 {
            return fail("inner_epochs, stride and groups_per_iteration must be positive".into());
        }
        self.weights.validate()
    }

    pub fn surrogate(&self) -> SurrogateConfig {
        SurrogateConfig {
            clip_eps: self.clip_eps,
            lambda_kl: self.lambda_kl,
            selection: StepSelection { stride: self.stride },
            ratio_mode: self.ratio_mode,
        }
    }
}

/// One condition's group of rollouts with rewards and advantages.
#[derive(Debug, Clone)]
pub struct GroupBatch {
    pub condition: Arc<Condition>,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
}

impl GroupBatch {
    /// Samples `cfg.group_size` rollouts under `params` and scores them.
    #[allow(clippy::too_many_arguments)]
    pub fn sample(
        den: &Denoiser,
        sched: &NoiseSchedule,
        params: &PolicyParams,
        input: &RpoInput,
        rewards: &RewardModel,
        group_size: usize,
        advantage_eps: f64,
        seed: u64,
    ) -> Result<Self> {
        let condition = Arc::new(Condition::new(&input.image, den.config().radius));
        let trajectories = sample_group(den, params, sched, condition.clone(), group_size, seed)?;
        let input_stats = channel_stats(&input.image);
        let scored = trajectories
            .par_iter()
            .map(|t| rewards.score_with_stats(&input_stats, &t.final_image, input.path.as_deref()))
            .collect::<Result<Vec<_>>>()?;
        let totals: Vec<f64> = scored.iter().map(|r| r.total).collect();
        let advantages = group_advantages(&totals, advantage_eps)?;
        Ok(Self { condition, trajectories, rewards: scored, advantages })
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rewards.iter().map(|r| r.total).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub objective: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub mean_reward: f64,
    pub reward_std: f64,
    /// Steps entering the ratio per trajectory.
    pub ratio_steps: usize,
}

/// One ascent step on the batch-mean objective. Diagnostics describe the
/// pre-update evaluation point.
pub fn rpo_step(
    den: &Denoiser,
    sched: &NoiseSchedule,
    params: &mut PolicyParams,
    theta_ref: &PolicyParams,
    batches: &[GroupBatch],
    cfg: &RpoConfig,
    opt: &mut Optimizer,
) -> Result<StepDiagnostics> {
    if batches.is_empty() {
        return Err(Error::Domain("rpo step over no groups".into()));
    }
    let scfg = cfg.surrogate();
    let n = batches.len() as f64;
    let mut grad = vec![0.0; den.param_count()];
    let (mut objective, mut surrogate, mut kl) = (0.0, 0.0, 0.0);
    let mut ratios = Vec::new();
    for b in batches {
        let e = rpo_gradient(den, sched, params, theta_ref, &b.trajectories, &b.advantages, &scfg)?;
        for (a, g) in grad.iter_mut().zip(e.grad.as_ref().expect("requested")) {
            *a += g / n;
        }
        objective += e.value / n;
        surrogate += e.surrogate / n;
        kl += e.kl / n;
        ratios.extend(e.ratios);
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite RPO gradient".into()));
    }
    opt.ascend(params, &grad)?;
    let totals: Vec<f64> = batches.iter().flat_map(|b| b.totals()).collect();
    let mean_reward = totals.iter().sum::<f64>() / totals.len() as f64;
    Ok(StepDiagnostics {
        objective,
        surrogate,
        kl,
        mean_ratio: ratios.iter().sum::<f64>() / ratios.len() as f64,
        clip_fraction: super::objective::clip_fraction(&ratios, cfg.clip_eps),
        mean_reward,
        reward_std: super::advantage::population_std(&totals),
        ratio_steps: scfg.selection.steps(sched)?.len(),
    })
}

/// A smoky training image and its corpus path, if any.
#[derive(Debug, Clone)]
pub struct RpoInput {
    pub image: ImageTensor,
    pub path: Option<String>,
}

pub const METRICS_COLUMNS: [&str; 9] = [
    "iteration",
    "mean_reward",
    "reward_var",
    "r_pg_mean",
    "r_vc_mean",
    "r_rf_mean",
    "kl",
    "clip_fraction",
    "wall_ms",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    /// Mean composite reward over every rollout of the iteration.
    pub mean_reward: f64,
    /// Within-group population variance of the composite reward, averaged
    /// over groups.
    pub reward_var: f64,
    pub r_pg_mean: f64,
    pub r_vc_mean: f64,
    pub r_rf_mean: f64,
    /// KL to the reference at the last inner epoch's evaluation point.
    pub kl: f64,
    pub clip_fraction: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct RpoOutcome {
    pub params: PolicyParams,
    pub metrics: Vec<IterationMetrics>,
    pub optimizer: AdamMoments,
}

/// Refines `init` against `rewards`; `init` is also the frozen reference.
/// `on_iteration` sees each metrics row as it is produced.
pub fn rpo_train(
    den: &Denoiser,
    sched: &NoiseSchedule,
    init: &PolicyParams,
    inputs: &[RpoInput],
    rewards: &RewardModel,
    cfg: &RpoConfig,
    mut on_iteration: impl FnMut(&IterationMetrics),
) -> Result<RpoOutcome> {
    cfg.validate()?;
    rewards.validate()?;
    if inputs.is_empty() {
        return Err(Error::Domain("rpo needs at least one smoky input".into()));
    }
    if init.len() != den.param_count() {
        return Err(Error::Dimension("initial parameters do not match the model".into()));
    }
    let theta_ref = init.clone();
    let mut params = init.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, params.len())?;
    let mut metrics = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let start = Instant::now();
        let mut pick = rng::stream(cfg.seed, &[rng::TAG_RPO, it as u64]);
        let chosen: Vec<usize> = (0..cfg.groups_per_iteration)
            .map(|_| pick.random_range(0..inputs.len()))
            .collect();
        // Sampling uses the snapshot; the recorded means are the old policy.
        let batches = chosen
            .iter()
            .enumerate()
            .map(|(j, &idx)| {
                let seed = rng::derive_seed(cfg.seed, &[rng::TAG_RPO, it as u64, j as u64]);
                GroupBatch::sample(den, sched, &params, &inputs[idx], rewards, cfg.group_size, cfg.advantage_eps, seed)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut diag = None;
        for _ in 0..cfg.inner_epochs {
            diag = Some(rpo_step(den, sched, &mut params, &theta_ref, &batches, cfg, &mut opt)?);
        }
        let diag = diag.expect("inner_epochs >= 1");

        let all: Vec<&RewardBreakdown> = batches.iter().flat_map(|b| &b.rewards).collect();
        let mean = |f: fn(&RewardBreakdown) -> f64| all.iter().map(|r| f(r)).sum::<f64>() / all.len() as f64;
        let reward_var = batches
            .iter()
            .map(|b| super::advantage::population_std(&b.totals()).powi(2))
            .sum::<f64>()
            / batches.len() as f64;
        let row = IterationMetrics {
            iteration: it,
            mean_reward: mean(|r| r.total),
            reward_var,
            r_pg_mean: mean(|r| r.r_pg),
            r_vc_mean: mean(|r| r.r_vc),
            r_rf_mean: mean(|r| r.r_rf),
            kl: diag.kl,
            clip_fraction: diag.clip_fraction,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_iteration(&row);
        metrics.push(row);
    }
    Ok(RpoOutcome { params, metrics, optimizer: opt.moments })
}
