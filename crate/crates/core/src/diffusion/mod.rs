//! The conditional diffusion restorer viewed as a stochastic policy.
//!
//! The reverse process is a chain of Gaussian steps
//! `x_{t-1} = mu_theta(x_t, t) + sigma_t * eps`; every noise draw is kept in
//! a [`Trajectory`] so the exact step likelihoods can be re-evaluated under
//! other parameter vectors.

mod checkpoint;
mod denoiser;
mod sampler;
mod schedule;

pub use checkpoint::{AdamMoments, Checkpoint};
pub use denoiser::{Condition, Denoiser, ForwardCache, ModelConfig, PolicyParams};
pub use sampler::{
    replay, reverse_step, rollout, sample_group, trajectory_log_density, NoiseMode, StepSelection,
    Trajectory,
};
pub use schedule::{forward_noise, make_schedule, NoiseSchedule, ScheduleConfig};
