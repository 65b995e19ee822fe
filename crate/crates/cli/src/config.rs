//! Run configuration: one TOML document with a section per pipeline stage.
//! Every field has a default; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use desmoke_core::diffusion::{ModelConfig, NoiseSchedule, ScheduleConfig};
use desmoke_core::policy::{OptimizerKind, PretrainConfig, RatioMode, RewardWeights, RpoConfig};
use desmoke_core::semantic::ConceptTraining;
use desmoke_core::smoke::SmokeConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub corpus: CorpusSection,
    pub smoke: SmokeSection,
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    pub concepts: ConceptSection,
    pub pretrain: PretrainSection,
    pub rpo: RpoSection,
    pub rewards: RewardSection,
    pub quality: QualitySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("run"),
            corpus: CorpusSection::default(),
            smoke: SmokeSection::default(),
            schedule: ScheduleSection::default(),
            model: ModelSection::default(),
            concepts: ConceptSection::default(),
            pretrain: PretrainSection::default(),
            rpo: RpoSection::default(),
            rewards: RewardSection::default(),
            quality: QualitySection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub pairs: usize,
    pub unpaired: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { pairs: 200, unpaired: 200, height: 16, width: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmokeSection {
    pub airlight: [f64; 3],
    pub density: f64,
    pub smoothness: f64,
}

impl Default for SmokeSection {
    fn default() -> Self {
        let d = SmokeConfig::default();
        Self { airlight: d.airlight, density: d.density, smoothness: d.smoothness }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { steps: 10, beta_min: 1e-3, beta_max: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub time_dim: usize,
    pub radius: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        Self { hidden: d.hidden, time_dim: d.time_dim, radius: d.radius }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Histogram,
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConceptSection {
    pub provider: ProviderKind,
    pub dim: usize,
    /// JSON table of embeddings keyed by image content hash.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    pub steps: usize,
    pub lr: f64,
    pub tau: f64,
}

impl Default for ConceptSection {
    fn default() -> Self {
        let d = ConceptTraining::default();
        Self { provider: ProviderKind::Histogram, dim: 64, embeddings: None, steps: d.steps, lr: d.lr, tau: d.tau }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

impl OptimizerName {
    pub fn kind(self) -> OptimizerKind {
        match self {
            OptimizerName::Adam => OptimizerKind::default(),
            OptimizerName::Sgd => OptimizerKind::Sgd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerName,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        Self { steps: d.steps, lr: d.lr, batch_size: d.batch_size, optimizer: OptimizerName::Adam }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RpoSection {
    pub group_size: usize,
    pub clip_eps: f64,
    pub lambda_kl: f64,
    pub lr: f64,
    pub iterations: usize,
    pub advantage_eps: f64,
    pub inner_epochs: usize,
    pub stride: usize,
    pub ratio_mode: RatioMode,
    pub groups_per_iteration: usize,
    pub optimizer: OptimizerName,
}

impl Default for RpoSection {
    fn default() -> Self {
        let d = RpoConfig::default();
        Self {
            group_size: d.group_size,
            clip_eps: d.clip_eps,
            lambda_kl: d.lambda_kl,
            lr: d.lr,
            iterations: d.iterations,
            advantage_eps: d.advantage_eps,
            inner_epochs: d.inner_epochs,
            stride: d.stride,
            ratio_mode: d.ratio_mode,
            groups_per_iteration: d.groups_per_iteration,
            optimizer: OptimizerName::Adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub w_pg: f64,
    pub w_rf: f64,
    pub w_vc: f64,
}

impl Default for RewardSection {
    fn default() -> Self {
        Self { w_pg: 1.0, w_rf: 1.0, w_vc: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualitySection {
    pub ceiq: bool,
    pub ceiq_scale: f64,
    pub ceiq_offset: f64,
    /// `path,score` CSV; setting it enables the LIQE slot.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub liqe_scores: Option<PathBuf>,
    pub liqe_scale: f64,
    pub liqe_offset: f64,
}

impl Default for QualitySection {
    fn default() -> Self {
        Self { ceiq: true, ceiq_scale: 1.0, ceiq_offset: 0.0, liqe_scores: None, liqe_scale: 1.0, liqe_offset: 0.0 }
    }
}

fn finite(name: &str, values: &[f64]) -> Result<(), CliError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be finite")))
    }
}

fn core(e: desmoke_core::Error) -> CliError {
    CliError::Config(e.to_string())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Checks every section; nothing runs on an invalid config.
    pub fn validate(&self) -> Result<(), CliError> {
        let c = &self.corpus;
        if c.pairs < 2 {
            return Err(CliError::Config("corpus.pairs must be at least 2".into()));
        }
        if c.height < 2 || c.width < 2 {
            return Err(CliError::Config("corpus images must be at least 2x2".into()));
        }
        self.smoke_config().validate().map_err(core)?;
        NoiseSchedule::new(self.schedule_config()).map_err(core)?;
        self.model_config(self.concepts.dim).validate().map_err(core)?;

        let k = &self.concepts;
        if k.dim == 0 {
            return Err(CliError::Config("concepts.dim must be positive".into()));
        }
        finite("concepts.lr", &[k.lr, k.tau])?;
        if !(k.tau > 0.0) || !(k.lr > 0.0) {
            return Err(CliError::Config("concepts.tau and concepts.lr must be positive".into()));
        }
        if k.provider == ProviderKind::Precomputed && k.embeddings.is_none() {
            return Err(CliError::Config("concepts.provider = \"precomputed\" needs concepts.embeddings".into()));
        }

        self.pretrain_config().validate().map_err(core)?;
        self.rpo_config().validate().map_err(core)?;

        let q = &self.quality;
        finite("quality coefficients", &[q.ceiq_scale, q.ceiq_offset, q.liqe_scale, q.liqe_offset])?;
        if self.rewards.w_rf != 0.0 && !q.ceiq && q.liqe_scores.is_none() {
            return Err(CliError::Config("rewards.w_rf is nonzero but no quality scorer is enabled".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.out = PathBuf::new();
        let bytes = serde_json::to_vec(&canon).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn smoke_config(&self) -> SmokeConfig {
        let s = &self.smoke;
        SmokeConfig { airlight: s.airlight, density: s.density, smoothness: s.smoothness, seed: self.seed }
    }

    pub fn schedule_config(&self) -> ScheduleConfig {
        let s = &self.schedule;
        ScheduleConfig { steps: s.steps, beta_min: s.beta_min, beta_max: s.beta_max }
    }

    pub fn model_config(&self, concept_dim: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig { hidden: m.hidden, time_dim: m.time_dim, concept_dim, radius: m.radius, init_seed: self.seed }
    }

    pub fn concept_training(&self) -> ConceptTraining {
        let k = &self.concepts;
        ConceptTraining { steps: k.steps, lr: k.lr, tau: k.tau, seed: self.seed }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            steps: p.steps,
            lr: p.lr,
            batch_size: p.batch_size,
            seed: self.seed,
            optimizer: p.optimizer.kind(),
        }
    }

    pub fn weights(&self) -> RewardWeights {
        let r = &self.rewards;
        RewardWeights { pg: r.w_pg, rf: r.w_rf, vc: r.w_vc }
    }

    pub fn rpo_config(&self) -> RpoConfig {
        let r = &self.rpo;
        RpoConfig {
            group_size: r.group_size,
            clip_eps: r.clip_eps,
            lambda_kl: r.lambda_kl,
            lr: r.lr,
            iterations: r.iterations,
            seed: self.seed,
            weights: self.weights(),
            advantage_eps: r.advantage_eps,
            inner_epochs: r.inner_epochs,
            stride: r.stride,
            ratio_mode: r.ratio_mode,
            groups_per_iteration: r.groups_per_iteration,
            optimizer: r.optimizer.kind(),
        }
    }
}
