use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::image::{channel_stats, ChannelStats, ImageTensor};
use crate::physics::{reward_physics_stats, PhysicsRewardBreakdown, PriorReference};
use crate::quality::{reward_quality, QualityScorer};
use crate::semantic::{reward_concept, ConceptPair, EmbeddingProvider};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub pg: f64,
    pub rf: f64,
    pub vc: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { pg: 1.0, rf: 1.0, vc: 1.0 }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        ensure_finite("reward weights", &[self.pg, self.rf, self.vc])
            .map_err(|_| Error::Config("reward weights must be finite".into()))
    }

    pub fn is_default(&self) -> bool {
        *self == Self::default()
    }
}

/// `w_pg * R_PG + w_rf * R_RF + w_vc * R_VC`.
pub fn total_reward(r_pg: f64, r_rf: f64, r_vc: f64, w: &RewardWeights) -> Result<f64> {
    ensure_finite("reward terms", &[r_pg, r_rf, r_vc])?;
    Ok(w.pg * r_pg + w.rf * r_rf + w.vc * r_vc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardBreakdown {
    pub physics: PhysicsRewardBreakdown,
    pub r_pg: f64,
    pub r_rf: f64,
    pub quality: Vec<(String, f64)>,
    pub r_vc: f64,
    pub total: f64,
}

/// Everything needed to score a restoration against its smoky input.
///
/// Terms with zero weight are skipped and reported as 0, so an ablation
/// does not need that term's artifacts.
pub struct RewardModel {
    pub prior: PriorReference,
    pub concepts: Option<ConceptPair>,
    pub provider: Option<Box<dyn EmbeddingProvider>>,
    pub scorers: Vec<Box<dyn QualityScorer>>,
    pub weights: RewardWeights,
}

impl RewardModel {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.weights.vc != 0.0 {
            let (Some(c), Some(p)) = (&self.concepts, &self.provider) else {
                return Err(Error::Config("semantic reward enabled without concepts and an embedding provider".into()));
            };
            if c.dim() != p.dim() {
                return Err(Error::Dimension(format!(
                    "concepts have dimension {}, provider {}",
                    c.dim(),
                    p.dim()
                )));
            }
        }
        if self.weights.rf != 0.0 && self.scorers.is_empty() {
            return Err(Error::Config("quality reward enabled with no scorers".into()));
        }
        Ok(())
    }

    /// `path` identifies the input image for table-backed scorers.
    pub fn score(&self, input: &ImageTensor, output: &ImageTensor, path: Option<&str>) -> Result<RewardBreakdown> {
        if !input.same_shape(output) {
            return Err(Error::Dimension("input and output shapes differ".into()));
        }
        self.score_with_stats(&channel_stats(input), output, path)
    }

    pub fn score_with_stats(
        &self,
        input_stats: &ChannelStats,
        output: &ImageTensor,
        path: Option<&str>,
    ) -> Result<RewardBreakdown> {
        let physics = reward_physics_stats(input_stats, &channel_stats(output), &self.prior);
        let (r_rf, quality) = if self.weights.rf != 0.0 {
            let q = reward_quality(output, path, &self.scorers)?;
            (q.total, q.terms)
        } else {
            (0.0, Vec::new())
        };
        let r_vc = match (&self.concepts, &self.provider) {
            (Some(c), Some(p)) if self.weights.vc != 0.0 => reward_concept(c, &p.embed(output)?)?,
            _ => 0.0,
        };
        let total = total_reward(physics.r_pg, r_rf, r_vc, &self.weights)?;
        Ok(RewardBreakdown { r_pg: physics.r_pg, physics, r_rf, quality, r_vc, total })
    }
}
