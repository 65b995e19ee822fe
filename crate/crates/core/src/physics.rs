//! Physics-guided color prior reward.
//!
//! Inter-channel term: the red-green and red-blue channel-mean gaps should be
//! at least as wide as the reference P95 gaps, and the green-blue gap no wider
//! than its P95:
//!
//! ```text
//! L_RG = max(0, MRG - |mu_R - mu_G|)
//! L_RB = max(0, MRB - |mu_R - mu_B|)
//! L_GB = max(0, |mu_G - mu_B| - MGB)
//! R_A  = -(L_RG + L_RB + L_GB)
//! ```
//!
//! Intra-channel term: reward changes to green and blue relative to the
//! input while penalizing changes to red, for mean, deviation and gradient:
//!
//! ```text
//! R_B = (dmu_G + dmu_B)/2 - dmu_R + (dsig_G + dsig_B)/2 - dsig_R
//!     + (dgrad_G + dgrad_B)/2 - dgrad_R
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{channel_stats, corpus_hash, percentile, ChannelStats, ImageTensor};

pub const PRIOR_PERCENTILE: f64 = 95.0;

/// Corpus-level P95 channel-mean gaps. Serializes as
/// `{mrg, mrb, mgb, corpus_hash, percentile}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorReference {
    pub mrg: f64,
    pub mrb: f64,
    pub mgb: f64,
    pub corpus_hash: String,
    pub percentile: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

pub fn build_prior_reference(corpus: &[ImageTensor]) -> Result<PriorReference> {
    if corpus.is_empty() {
        return Err(Error::Domain("prior reference needs at least one image".into()));
    }
    let mut rg = Vec::with_capacity(corpus.len());
    let mut rb = Vec::with_capacity(corpus.len());
    let mut gb = Vec::with_capacity(corpus.len());
    for img in corpus {
        let mu = channel_stats(img).mu;
        rg.push((mu[0] - mu[1]).abs());
        rb.push((mu[0] - mu[2]).abs());
        gb.push((mu[1] - mu[2]).abs());
    }
    Ok(PriorReference {
        mrg: percentile(&rg, PRIOR_PERCENTILE)?,
        mrb: percentile(&rb, PRIOR_PERCENTILE)?,
        mgb: percentile(&gb, PRIOR_PERCENTILE)?,
        corpus_hash: corpus_hash(corpus),
        percentile: PRIOR_PERCENTILE,
        config_hash: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterChannel {
    pub l_rg: f64,
    pub l_rb: f64,
    pub l_gb: f64,
    pub r_a: f64,
}

/// Absolute per-channel differences of the statistics, R, G, B order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntraDeltas {
    pub mu: [f64; 3],
    pub sigma: [f64; 3],
    pub grad: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsRewardBreakdown {
    pub l_rg: f64,
    pub l_rb: f64,
    pub l_gb: f64,
    pub r_a: f64,
    pub deltas: IntraDeltas,
    pub r_b: f64,
    pub r_pg: f64,
}

pub fn reward_inter_stats(mu: [f64; 3], prior: &PriorReference) -> InterChannel {
    let l_rg = (prior.mrg - (mu[0] - mu[1]).abs()).max(0.0);
    let l_rb = (prior.mrb - (mu[0] - mu[2]).abs()).max(0.0);
    let l_gb = ((mu[1] - mu[2]).abs() - prior.mgb).max(0.0);
    InterChannel { l_rg, l_rb, l_gb, r_a: -(l_rg + l_rb + l_gb) }
}

pub fn reward_inter(pred: &ImageTensor, prior: &PriorReference) -> InterChannel {
    reward_inter_stats(channel_stats(pred).mu, prior)
}

fn green_blue_over_red(d: [f64; 3]) -> f64 {
    (d[1] + d[2]) / 2.0 - d[0]
}

pub fn reward_intra_stats(input: &ChannelStats, pred: &ChannelStats) -> (IntraDeltas, f64) {
    let diff = |a: [f64; 3], b: [f64; 3]| std::array::from_fn(|c| (a[c] - b[c]).abs());
    let deltas = IntraDeltas {
        mu: diff(pred.mu, input.mu),
        sigma: diff(pred.sigma, input.sigma),
        grad: diff(pred.grad, input.grad),
    };
    let r_b = green_blue_over_red(deltas.mu)
        + green_blue_over_red(deltas.sigma)
        + green_blue_over_red(deltas.grad);
    (deltas, r_b)
}

pub fn reward_intra(input: &ImageTensor, pred: &ImageTensor) -> Result<(IntraDeltas, f64)> {
    if !input.same_shape(pred) {
        return Err(Error::Dimension(format!(
            "input {}x{} vs prediction {}x{}",
            input.height(),
            input.width(),
            pred.height(),
            pred.width()
        )));
    }
    Ok(reward_intra_stats(&channel_stats(input), &channel_stats(pred)))
}

/// `R_PG = R_A + R_B`, scored on the clamped restoration.
pub fn reward_physics(
    input: &ImageTensor,
    pred: &ImageTensor,
    prior: &PriorReference,
) -> Result<PhysicsRewardBreakdown> {
    if !input.same_shape(pred) {
        return Err(Error::Dimension("input and prediction shapes differ".into()));
    }
    Ok(reward_physics_stats(&channel_stats(input), &channel_stats(pred), prior))
}

pub fn reward_physics_stats(
    input: &ChannelStats,
    pred: &ChannelStats,
    prior: &PriorReference,
) -> PhysicsRewardBreakdown {
    let inter = reward_inter_stats(pred.mu, prior);
    let (deltas, r_b) = reward_intra_stats(input, pred);
    PhysicsRewardBreakdown {
        l_rg: inter.l_rg,
        l_rb: inter.l_rb,
        l_gb: inter.l_gb,
        r_a: inter.r_a,
        deltas,
        r_b,
        r_pg: inter.r_a + r_b,
    }
}
