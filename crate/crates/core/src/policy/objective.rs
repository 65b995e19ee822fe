//! Importance ratios, the clipped surrogate, the KL anchor and the analytic
//! gradient of `J = L_clip - lambda * D_KL`, maximized.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, ForwardCache, NoiseSchedule, PolicyParams, StepSelection, Trajectory};
use crate::error::{ensure_finite, Error, Result};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_traj(sched: &NoiseSchedule, traj: &Trajectory) -> Result<()> {
    if traj.steps() != sched.steps() {
        return Err(Error::Dimension("trajectory length does not match the schedule".into()));
    }
    Ok(())
}

fn check_sigma(sched: &NoiseSchedule, t: usize) -> Result<f64> {
    let s = sched.sigma(t);
    if s <= 0.0 {
        return Err(Error::ZeroVariance { step: t });
    }
    Ok(s)
}

/// `log rho_t`, both means evaluated at the recorded `x_t`.
pub fn step_log_ratio(
    den: &Denoiser,
    sched: &NoiseSchedule,
    theta: &PolicyParams,
    theta_old: &PolicyParams,
    traj: &Trajectory,
    t: usize,
) -> Result<f64> {
    check_traj(sched, traj)?;
    let s = check_sigma(sched, t)?;
    let x_t = traj.state_before(t);
    let x_prev = traj.state_after(t);
    let mu = den.predict_mean(theta, sched, &traj.cond, x_t, t)?;
    let mu_old = den.predict_mean(theta_old, sched, &traj.cond, x_t, t)?;
    Ok((sq_dist(x_prev, &mu_old) - sq_dist(x_prev, &mu)) / (2.0 * s * s))
}

pub fn importance_ratio(
    den: &Denoiser,
    sched: &NoiseSchedule,
    theta: &PolicyParams,
    theta_old: &PolicyParams,
    traj: &Trajectory,
    t: usize,
) -> Result<f64> {
    step_log_ratio(den, sched, theta, theta_old, traj, t).map(f64::exp)
}

/// Sum of per-step log ratios over the selected steps.
pub fn trajectory_log_ratio(
    den: &Denoiser,
    sched: &NoiseSchedule,
    theta: &PolicyParams,
    theta_old: &PolicyParams,
    traj: &Trajectory,
    selection: StepSelection,
) -> Result<f64> {
    let mut total = 0.0;
    for t in selection.steps(sched)? {
        total += step_log_ratio(den, sched, theta, theta_old, traj, t)?;
    }
    Ok(total)
}

fn check_clip(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Config(format!("clip epsilon {eps} outside (0, 1)")));
    }
    Ok(())
}

fn clipped_term(rho: f64, adv: f64, eps: f64) -> (f64, bool) {
    let unclipped = rho * adv;
    let clipped = rho.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        (unclipped, true)
    } else {
        (clipped, false)
    }
}

/// `(1/G) sum_i min(rho_i A_i, clip(rho_i, 1-eps, 1+eps) A_i)`, an objective
/// to maximize.
pub fn clipped_surrogate(ratios: &[f64], advantages: &[f64], clip_eps: f64) -> Result<f64> {
    if ratios.len() != advantages.len() || ratios.is_empty() {
        return Err(Error::Dimension(format!(
            "{} ratios vs {} advantages",
            ratios.len(),
            advantages.len()
        )));
    }
    check_clip(clip_eps)?;
    let sum: f64 = ratios
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| clipped_term(r, a, clip_eps).0)
        .sum();
    Ok(sum / ratios.len() as f64)
}

/// Share of ratios outside `[1 - eps, 1 + eps]`.
pub fn clip_fraction(ratios: &[f64], clip_eps: f64) -> f64 {
    if ratios.is_empty() {
        return 0.0;
    }
    let out = ratios
        .iter()
        .filter(|&&r| r < 1.0 - clip_eps || r > 1.0 + clip_eps)
        .count();
    out as f64 / ratios.len() as f64
}

/// KL between two Gaussians sharing the isotropic scale `sigma`.
pub fn step_kl(mu: &[f64], mu_ref: &[f64], sigma: f64) -> f64 {
    sq_dist(mu, mu_ref) / (2.0 * sigma * sigma)
}

/// `mean_i sum_t ||mu_theta - mu_ref||^2 / (2 sigma_t^2)` at recorded states.
pub fn kl_penalty(
    den: &Denoiser,
    sched: &NoiseSchedule,
    theta: &PolicyParams,
    theta_ref: &PolicyParams,
    trajs: &[Trajectory],
    selection: StepSelection,
) -> Result<f64> {
    if trajs.is_empty() {
        return Err(Error::Domain("KL penalty over an empty batch".into()));
    }
    let steps = selection.steps(sched)?;
    let per_traj = trajs
        .par_iter()
        .map(|traj| {
            check_traj(sched, traj)?;
            let mut kl = 0.0;
            for &t in &steps {
                let s = sched.sigma(t);
                let x_t = traj.state_before(t);
                let mu = den.predict_mean(theta, sched, &traj.cond, x_t, t)?;
                let mu_ref = den.predict_mean(theta_ref, sched, &traj.cond, x_t, t)?;
                kl += step_kl(&mu, &mu_ref, s);
            }
            Ok(kl)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_traj.iter().sum::<f64>() / trajs.len() as f64)
}

/// Product of step ratios per trajectory, or one clipped term per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    #[default]
    Trajectory,
    PerStep,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateConfig {
    pub clip_eps: f64,
    pub lambda_kl: f64,
    pub selection: StepSelection,
    pub ratio_mode: RatioMode,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self { clip_eps: 0.2, lambda_kl: 0.01, selection: StepSelection::all(), ratio_mode: RatioMode::Trajectory }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEval {
    /// `surrogate - lambda * kl`.
    pub value: f64,
    pub surrogate: f64,
    pub kl: f64,
    /// Trajectory ratios, or every step ratio in per-step mode.
    pub ratios: Vec<f64>,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    /// `dJ/dtheta`, present when requested.
    pub grad: Option<Vec<f64>>,
}

struct StepEval {
    t: usize,
    mu: Vec<f64>,
    cache: ForwardCache,
    log_ratio: f64,
    kl: f64,
    mu_ref: Option<Vec<f64>>,
}

struct TrajEval {
    surrogate: f64,
    kl: f64,
    ratios: Vec<f64>,
    grad: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
fn eval_trajectory(
    den: &Denoiser,
    sched: &NoiseSchedule,
    theta: &PolicyParams,
    theta_ref: &PolicyParams,
    traj: &Trajectory,
    adv: f64,
    steps: &[usize],
    cfg: &SurrogateConfig,
    want_grad: bool,
) -> Result<TrajEval> {
    check_traj(sched, traj)?;
    let use_kl = cfg.lambda_kl != 0.0;
    let mut evals = Vec::with_capacity(steps.len());
    for &t in steps {
        let s = sched.sigma(t);
        let x_t = traj.state_before(t);
        let x_prev = traj.state_after(t);
        let (mu, cache) = den.forward(theta, sched, &traj.cond, x_t, t)?;
        let log_ratio = (sq_dist(x_prev, traj.mean_at(t)) - sq_dist(x_prev, &mu)) / (2.0 * s * s);
        let (kl, mu_ref) = if use_kl {
            let mu_ref = den.predict_mean(theta_ref, sched, &traj.cond, x_t, t)?;
            (step_kl(&mu, &mu_ref, s), Some(mu_ref))
        } else {
            (0.0, None)
        };
        evals.push(StepEval { t, mu, cache, log_ratio, kl, mu_ref });
    }

    // Coefficient on d(log rho_t)/d theta for each step.
    let (surrogate, ratios, ratio_coefs): (f64, Vec<f64>, Vec<f64>) = match cfg.ratio_mode {
        RatioMode::Trajectory => {
            let rho = evals.iter().map(|e| e.log_ratio).sum::<f64>().exp();
            let (term, active) = clipped_term(rho, adv, cfg.clip_eps);
            let c = if active { adv * rho } else { 0.0 };
            (term, vec![rho], vec![c; evals.len()])
        }
        RatioMode::PerStep => {
            let n = evals.len() as f64;
            let mut sum = 0.0;
            let mut ratios = Vec::with_capacity(evals.len());
            let mut coefs = Vec::with_capacity(evals.len());
            for e in &evals {
                let rho = e.log_ratio.exp();
                let (term, active) = clipped_term(rho, adv, cfg.clip_eps);
                sum += term;
                ratios.push(rho);
                coefs.push(if active { adv * rho / n } else { 0.0 });
            }
            (sum / n, ratios, coefs)
        }
    };
    let kl: f64 = evals.iter().map(|e| e.kl).sum();

    let grad = if want_grad {
        let mut grad = vec![0.0; den.param_count()];
        let mut gm = vec![0.0; traj.cond.state_dim()];
        for (e, &coef) in evals.iter().zip(&ratio_coefs) {
            let s2 = sched.sigma(e.t).powi(2);
            let x_prev = traj.state_after(e.t);
            let mut any = false;
            for (i, g) in gm.iter_mut().enumerate() {
                // d log rho / d mu = (x_{t-1} - mu) / sigma^2
                *g = coef * (x_prev[i] - e.mu[i]) / s2;
                if let Some(mu_ref) = &e.mu_ref {
                    *g -= cfg.lambda_kl * (e.mu[i] - mu_ref[i]) / s2;
                }
                any |= *g != 0.0;
            }
            if any {
                den.backward(theta, &traj.cond, &e.cache, &gm, &mut grad)?;
            }
        }
        Some(grad)
    } else {
        None
    };
    Ok(TrajEval { surrogate, kl, ratios, grad })
}

fn evaluate(
    den: &Denoiser,
    sched: &NoiseSchedule,
    theta: &PolicyParams,
    theta_ref: &PolicyParams,
    trajs: &[Trajectory],
    advantages: &[f64],
    cfg: &SurrogateConfig,
    want_grad: bool,
) -> Result<ObjectiveEval> {
    if trajs.len() != advantages.len() || trajs.is_empty() {
        return Err(Error::Dimension(format!(
            "{} trajectories vs {} advantages",
            trajs.len(),
            advantages.len()
        )));
    }
    check_clip(cfg.clip_eps)?;
    if !(cfg.lambda_kl >= 0.0) {
        return Err(Error::Config(format!("lambda_kl {} must be nonnegative", cfg.lambda_kl)));
    }
    ensure_finite("advantages", advantages)?;
    let steps = cfg.selection.steps(sched)?;
    let parts = trajs
        .par_iter()
        .zip(advantages.par_iter())
        .map(|(traj, &adv)| eval_trajectory(den, sched, theta, theta_ref, traj, adv, &steps, cfg, want_grad))
        .collect::<Result<Vec<_>>>()?;

    let g = trajs.len() as f64;
    let surrogate = parts.iter().map(|p| p.surrogate).sum::<f64>() / g;
    let kl = parts.iter().map(|p| p.kl).sum::<f64>() / g;
    let ratios: Vec<f64> = parts.iter().flat_map(|p| p.ratios.iter().copied()).collect();
    let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let grad = if want_grad {
        let mut total = vec![0.0; den.param_count()];
        for p in &parts {
            for (t, v) in total.iter_mut().zip(p.grad.as_ref().expect("requested")) {
                *t += v / g;
            }
        }
        ensure_finite("objective gradient", &total)?;
        Some(total)
    } else {
        None
    };
    let value = surrogate - cfg.lambda_kl * kl;
    ensure_finite("objective", &[value])?;
    Ok(ObjectiveEval {
        value,
        surrogate,
        kl,
        clip_fraction: clip_fraction(&ratios, cfg.clip_eps),
        mean_ratio,
        ratios,
        grad,
    })
}

/// Objective value on a fixed batch. Old-policy means are the ones recorded
/// in each trajectory.
pub fn rpo_objective(
    den: &Denoiser,
    sched: &NoiseSchedule,
    theta: &PolicyParams,
    theta_ref: &PolicyParams,
    trajs: &[Trajectory],
    advantages: &[f64],
    cfg: &SurrogateConfig,
) -> Result<ObjectiveEval> {
    evaluate(den, sched, theta, theta_ref, trajs, advantages, cfg, false)
}

/// Objective value plus its gradient. Old-policy terms and advantages are
/// constants; a trajectory contributes only while its unclipped branch is
/// the active side of the min.
pub fn rpo_gradient(
    den: &Denoiser,
    sched: &NoiseSchedule,
    theta: &PolicyParams,
    theta_ref: &PolicyParams,
    trajs: &[Trajectory],
    advantages: &[f64],
    cfg: &SurrogateConfig,
) -> Result<ObjectiveEval> {
    evaluate(den, sched, theta, theta_ref, trajs, advantages, cfg, true)
}
