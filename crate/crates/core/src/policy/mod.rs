//! Critic-free group-relative policy optimization for the diffusion restorer,
//! plus the supervised cold start.

mod advantage;
mod objective;
mod optim;
mod pretrain;
mod reward;
mod rpo;

pub use advantage::{group_advantages, population_std, DEFAULT_ADVANTAGE_EPS};
pub use objective::{
    clip_fraction, clipped_surrogate, importance_ratio, kl_penalty, rpo_gradient, rpo_objective,
    step_kl, step_log_ratio, trajectory_log_ratio, ObjectiveEval, RatioMode, SurrogateConfig,
};
pub use optim::{Optimizer, OptimizerKind};
pub use pretrain::{
    pretrain, pretrain_loss_and_grad, pretrain_step, PretrainConfig, PretrainLog, PretrainSample,
};
pub use reward::{total_reward, RewardBreakdown, RewardModel, RewardWeights};
pub use rpo::{
    rpo_step, rpo_train, GroupBatch, IterationMetrics, RpoConfig, RpoInput, RpoOutcome,
    StepDiagnostics, METRICS_COLUMNS,
};
