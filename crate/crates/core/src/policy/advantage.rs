use crate::error::{ensure_finite, Error, Result};

pub const DEFAULT_ADVANTAGE_EPS: f64 = 1e-8;

pub fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// `A_i = (r_i - mean) / max(std, eps)`, population standard deviation,
/// re-centered so the group sums to zero to rounding.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Domain(format!("group of {} rewards, need at least 2", rewards.len())));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("advantage floor {eps} must be positive")));
    }
    ensure_finite("group rewards", rewards)?;
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let denom = population_std(rewards).max(eps);
    let mut adv: Vec<f64> = rewards.iter().map(|r| (r - mean) / denom).collect();
    let drift = adv.iter().sum::<f64>() / n;
    for a in &mut adv {
        *a -= drift;
    }
    Ok(adv)
}
