//! Concept-embedding semantic reward.
//!
//! A pair of unit "clear" / "smoky" concept vectors is fit contrastively to
//! embeddings of clean and smoky images:
//!
//! ```text
//! L_match = -(cos(v_neg, e(LQ)) + cos(v_pos, e(HQ)))
//! ```
//!
//! and a restoration is scored by the log-probability of the clear concept in
//! a two-way softmax over cosine similarities at temperature `tau`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::image::{ImageTensor, CHANNELS};
use crate::rng;

pub const DEFAULT_TAU: f64 = 0.07;

/// Maps an image to a unit vector of fixed dimension.
pub trait EmbeddingProvider: Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, img: &ImageTensor) -> Result<Vec<f64>>;
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > 1e-300) || !n.is_finite() {
        return Err(Error::Numeric(format!("cannot normalize vector with norm {n}")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("cosine with a zero-norm vector".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Fixed random projection of soft color histograms and a magnitude-weighted
/// gradient-orientation histogram. Smoke pulls the color histograms toward
/// the airlight and flattens gradients, which moves the embedding.
#[derive(Debug, Clone)]
pub struct HistogramProjection {
    seed: u64,
    dim: usize,
    bins: usize,
    orient_bins: usize,
    projection: Vec<f64>,
}

impl HistogramProjection {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let (bins, orient_bins) = (32, 8);
        let n_feat = CHANNELS * bins + orient_bins;
        let mut r = rng::stream(seed, &[rng::TAG_PROJECTION, dim as u64]);
        let scale = 1.0 / (dim as f64).sqrt();
        let projection = rng::normal_vec(&mut r, dim * n_feat).into_iter().map(|v| v * scale).collect();
        Ok(Self { seed, dim, bins, orient_bins, projection })
    }

    fn n_features(&self) -> usize {
        CHANNELS * self.bins + self.orient_bins
    }

    /// Raw features before projection: centered color histograms, then the
    /// orientation histogram.
    pub fn features(&self, img: &ImageTensor) -> Vec<f64> {
        let mut f = vec![0.0; self.n_features()];
        let n = img.pixel_count() as f64;
        let nb = self.bins as f64;
        for px in img.data().chunks_exact(CHANNELS) {
            for c in 0..CHANNELS {
                soft_bin(&mut f[c * self.bins..(c + 1) * self.bins], px[c] * nb - 0.5, false, 1.0 / n);
            }
        }
        for v in &mut f[..CHANNELS * self.bins] {
            *v -= 1.0 / nb;
        }
        let lum = img.luminance();
        let (h, w) = (img.height(), img.width());
        let ob = self.orient_bins as f64;
        let orient = &mut f[CHANNELS * self.bins..];
        for y in 0..h {
            for x in 0..w {
                let v = lum[y * w + x];
                let dx = lum[y * w + (x + 1).min(w - 1)] - v;
                let dy = lum[(y + 1).min(h - 1) * w + x] - v;
                let mag = (dx * dx + dy * dy).sqrt();
                if mag == 0.0 {
                    continue;
                }
                let theta = dy.atan2(dx).rem_euclid(PI);
                soft_bin(orient, theta / PI * ob - 0.5, true, mag / n);
            }
        }
        f
    }
}

/// Splits `weight` linearly between the two bins around `pos`.
fn soft_bin(hist: &mut [f64], pos: f64, circular: bool, weight: f64) {
    let n = hist.len() as isize;
    let lo = pos.floor();
    let frac = pos - lo;
    let lo = lo as isize;
    for (b, wgt) in [(lo, 1.0 - frac), (lo + 1, frac)] {
        let idx = if circular { b.rem_euclid(n) } else { b.clamp(0, n - 1) };
        hist[idx as usize] += weight * wgt;
    }
}

impl EmbeddingProvider for HistogramProjection {
    fn id(&self) -> String {
        format!("histogram-projection/seed={}/dim={}", self.seed, self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        let f = self.features(img);
        let nf = f.len();
        let v: Vec<f64> = (0..self.dim)
            .map(|d| dot(&self.projection[d * nf..(d + 1) * nf], &f))
            .collect();
        normalize(&v)
    }
}

/// Externally computed embeddings keyed by [`ImageTensor::content_hash`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecomputedEmbeddings {
    pub id: String,
    pub dim: usize,
    pub embeddings: HashMap<String, Vec<f64>>,
}

impl PrecomputedEmbeddings {
    pub fn load(path: &Path) -> Result<Self> {
        let mut table: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        for (key, v) in table.embeddings.iter_mut() {
            if v.len() != table.dim {
                return Err(Error::Dimension(format!(
                    "embedding for {key} has {} entries, expected {}",
                    v.len(),
                    table.dim
                )));
            }
            *v = normalize(v)?;
        }
        Ok(table)
    }
}

impl EmbeddingProvider for PrecomputedEmbeddings {
    fn id(&self) -> String {
        format!("precomputed/{}", self.id)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        let key = img.content_hash();
        self.embeddings
            .get(&key)
            .cloned()
            .ok_or_else(|| Error::Domain(format!("no precomputed embedding for image {key}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptPair {
    pub v_pos: Vec<f64>,
    pub v_neg: Vec<f64>,
    pub tau: f64,
}

impl ConceptPair {
    pub fn new(v_pos: Vec<f64>, v_neg: Vec<f64>, tau: f64) -> Result<Self> {
        if v_pos.len() != v_neg.len() {
            return Err(Error::Dimension("concept vectors differ in length".into()));
        }
        check_tau(tau)?;
        Ok(Self { v_pos: normalize(&v_pos)?, v_neg: normalize(&v_neg)?, tau })
    }

    pub fn dim(&self) -> usize {
        self.v_pos.len()
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Domain(format!("temperature {tau} must be positive")));
    }
    Ok(())
}

/// JSON form: `{dim, v_pos, v_neg, tau, provider_id, corpus_hash}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptFile {
    pub dim: usize,
    pub v_pos: Vec<f64>,
    pub v_neg: Vec<f64>,
    pub tau: f64,
    pub provider_id: String,
    pub corpus_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl ConceptFile {
    pub fn concepts(&self) -> Result<ConceptPair> {
        if self.v_pos.len() != self.dim {
            return Err(Error::Dimension(format!(
                "v_pos has {} entries, dim says {}",
                self.v_pos.len(),
                self.dim
            )));
        }
        ConceptPair::new(self.v_pos.clone(), self.v_neg.clone(), self.tau)
    }
}

/// `-(cos(v_neg, lq) + cos(v_pos, hq))`; lower is better, minimum -2.
pub fn match_loss(concepts: &ConceptPair, lq_emb: &[f64], hq_emb: &[f64]) -> Result<f64> {
    Ok(-(cosine(&concepts.v_neg, lq_emb)? + cosine(&concepts.v_pos, hq_emb)?))
}

/// `log softmax` weight of the clear concept, in `(-inf, 0)`.
pub fn reward_concept(concepts: &ConceptPair, img_emb: &[f64]) -> Result<f64> {
    check_tau(concepts.tau)?;
    let cos_pos = cosine(img_emb, &concepts.v_pos)?;
    let cos_neg = cosine(img_emb, &concepts.v_neg)?;
    Ok(log_sigmoid((cos_pos - cos_neg) / concepts.tau))
}

/// `log(1 / (1 + exp(-x)))` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptTraining {
    pub steps: usize,
    pub lr: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for ConceptTraining {
    fn default() -> Self {
        Self { steps: 200, lr: 0.2, tau: DEFAULT_TAU, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedConcepts {
    pub concepts: ConceptPair,
    /// Mean matching loss before each step, then after the last one.
    pub loss_trace: Vec<f64>,
    pub final_loss: f64,
}

/// Both concepts start from the same seeded random unit vector.
pub fn initial_concept(dim: usize, seed: u64) -> Result<Vec<f64>> {
    let mut r = rng::stream(seed, &[rng::TAG_CONCEPT, dim as u64]);
    normalize(&rng::normal_vec(&mut r, dim))
}

fn mean_cos(v: &[f64], embs: &[Vec<f64>]) -> f64 {
    embs.iter().map(|e| dot(v, e)).sum::<f64>() / embs.len() as f64
}

/// Projected gradient step on the unit sphere toward higher mean cosine.
fn sphere_step(v: &[f64], embs: &[Vec<f64>], lr: f64) -> Result<Vec<f64>> {
    let n = embs.len() as f64;
    let c = mean_cos(v, embs);
    // d(-mean cos)/dv restricted to the tangent space at v.
    let mut next = v.to_vec();
    for (i, x) in next.iter_mut().enumerate() {
        let mean_e = embs.iter().map(|e| e[i]).sum::<f64>() / n;
        *x += lr * (mean_e - c * v[i]);
    }
    normalize(&next)
}

/// Fits the concept pair on precomputed unit embeddings.
pub fn train_concepts_on_embeddings(
    lq: &[Vec<f64>],
    hq: &[Vec<f64>],
    cfg: &ConceptTraining,
) -> Result<TrainedConcepts> {
    if lq.is_empty() || lq.len() != hq.len() {
        return Err(Error::Domain("concept training needs at least one paired sample".into()));
    }
    check_tau(cfg.tau)?;
    let dim = lq[0].len();
    if lq.iter().chain(hq).any(|e| e.len() != dim) {
        return Err(Error::Dimension("embeddings differ in dimension".into()));
    }
    let init = initial_concept(dim, cfg.seed)?;
    let (mut v_pos, mut v_neg) = (init.clone(), init);
    let loss = |vp: &[f64], vn: &[f64]| -(mean_cos(vn, lq) + mean_cos(vp, hq));
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        let l = loss(&v_pos, &v_neg);
        if !l.is_finite() {
            return Err(Error::Numeric("concept matching loss is not finite".into()));
        }
        trace.push(l);
        v_pos = sphere_step(&v_pos, hq, cfg.lr)?;
        v_neg = sphere_step(&v_neg, lq, cfg.lr)?;
    }
    let final_loss = loss(&v_pos, &v_neg);
    ensure_finite("concept matching loss", &[final_loss])?;
    trace.push(final_loss);
    Ok(TrainedConcepts {
        concepts: ConceptPair { v_pos, v_neg, tau: cfg.tau },
        loss_trace: trace,
        final_loss,
    })
}

/// `pairs` holds `(smoky, clean)` images.
pub fn train_concepts(
    provider: &dyn EmbeddingProvider,
    pairs: &[(&ImageTensor, &ImageTensor)],
    cfg: &ConceptTraining,
) -> Result<TrainedConcepts> {
    let lq = pairs.iter().map(|(s, _)| provider.embed(s)).collect::<Result<Vec<_>>>()?;
    let hq = pairs.iter().map(|(_, c)| provider.embed(c)).collect::<Result<Vec<_>>>()?;
    train_concepts_on_embeddings(&lq, &hq, cfg)
}
