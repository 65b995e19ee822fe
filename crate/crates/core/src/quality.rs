//! Reference-free quality reward: a sum of pluggable single-image scorers.

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const LUMA_BINS: usize = 256;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// A deterministic no-reference quality estimate, higher is better.
///
/// `path` is the image's corpus-relative path when it came from disk; scorers
/// backed by precomputed tables need it, analytic scorers ignore it.
pub trait QualityScorer: Send + Sync {
    fn id(&self) -> &str;
    fn range(&self) -> (f64, f64);
    fn score(&self, img: &ImageTensor, path: Option<&str>) -> Result<f64>;
}

pub fn luma_bin(y: f64) -> usize {
    ((y * LUMA_BINS as f64) as usize).min(LUMA_BINS - 1)
}

pub fn luma_histogram(lum: &[f64]) -> [usize; LUMA_BINS] {
    let mut h = [0usize; LUMA_BINS];
    for &y in lum {
        h[luma_bin(y)] += 1;
    }
    h
}

/// Shannon entropy of the 256-bin luminance histogram, in bits.
pub fn luma_entropy(lum: &[f64]) -> f64 {
    let n = lum.len() as f64;
    luma_histogram(lum)
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Classic CDF equalization onto [0, 1]. A single-bin histogram maps to itself.
pub fn equalize(lum: &[f64]) -> Vec<f64> {
    let hist = luma_histogram(lum);
    let n = lum.len();
    let mut cdf = [0usize; LUMA_BINS];
    let mut acc = 0;
    for (c, h) in cdf.iter_mut().zip(hist) {
        acc += h;
        *c = acc;
    }
    let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    if n == cdf_min {
        return lum.to_vec();
    }
    let denom = (n - cdf_min) as f64;
    lum.iter()
        .map(|&y| (cdf[luma_bin(y)] - cdf_min) as f64 / denom)
        .collect()
}

/// Single-window structural similarity over the whole signal.
pub fn global_ssim(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CeiqTerms {
    pub similarity: f64,
    pub entropy_bits: f64,
    pub score: f64,
}

pub fn ceiq_terms(img: &ImageTensor) -> CeiqTerms {
    let lum = img.luminance();
    let similarity = global_ssim(&lum, &equalize(&lum)).clamp(0.0, 1.0);
    let entropy_bits = luma_entropy(&lum);
    CeiqTerms { similarity, entropy_bits, score: 0.5 * similarity + 0.5 * entropy_bits / 8.0 }
}

/// Contrast/entropy proxy in [0, 1].
pub fn ceiq_proxy(img: &ImageTensor) -> f64 {
    ceiq_terms(img).score
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CeiqProxy;

impl QualityScorer for CeiqProxy {
    fn id(&self) -> &str {
        "ceiq_proxy"
    }

    fn range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }

    fn score(&self, img: &ImageTensor, _path: Option<&str>) -> Result<f64> {
        Ok(ceiq_proxy(img))
    }
}

/// Scores looked up from a `path,score` sidecar CSV by exact path.
#[derive(Debug, Clone)]
pub struct ExternalScores {
    id: String,
    range: (f64, f64),
    scores: HashMap<String, f64>,
}

#[derive(Deserialize)]
struct ScoreRow {
    path: String,
    score: f64,
}

impl ExternalScores {
    pub fn new(id: impl Into<String>, range: (f64, f64), scores: HashMap<String, f64>) -> Self {
        Self { id: id.into(), range, scores }
    }

    pub fn from_csv(id: impl Into<String>, range: (f64, f64), path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut scores = HashMap::new();
        for row in reader.deserialize() {
            let row: ScoreRow = row?;
            if !row.score.is_finite() {
                return Err(Error::Format {
                    what: "score sidecar",
                    reason: format!("non-finite score for {}", row.path),
                });
            }
            scores.insert(row.path, row.score);
        }
        Ok(Self::new(id, range, scores))
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

impl QualityScorer for ExternalScores {
    fn id(&self) -> &str {
        &self.id
    }

    fn range(&self) -> (f64, f64) {
        self.range
    }

    fn score(&self, _img: &ImageTensor, path: Option<&str>) -> Result<f64> {
        let path = path.ok_or_else(|| Error::Scorer {
            id: self.id.clone(),
            reason: "image has no path to look up".into(),
        })?;
        self.scores.get(path).copied().ok_or_else(|| Error::Scorer {
            id: self.id.clone(),
            reason: format!("no score for {path}"),
        })
    }
}

/// `scale * inner + offset`.
pub struct Normalized<S> {
    pub inner: S,
    pub scale: f64,
    pub offset: f64,
}

impl<S: QualityScorer> QualityScorer for Normalized<S> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn range(&self) -> (f64, f64) {
        let (lo, hi) = self.inner.range();
        let (a, b) = (self.scale * lo + self.offset, self.scale * hi + self.offset);
        (a.min(b), a.max(b))
    }

    fn score(&self, img: &ImageTensor, path: Option<&str>) -> Result<f64> {
        Ok(self.scale * self.inner.score(img, path)? + self.offset)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityBreakdown {
    pub terms: Vec<(String, f64)>,
    pub total: f64,
}

pub fn reward_quality(
    img: &ImageTensor,
    path: Option<&str>,
    scorers: &[Box<dyn QualityScorer>],
) -> Result<QualityBreakdown> {
    if scorers.is_empty() {
        return Err(Error::Domain("quality reward needs at least one scorer".into()));
    }
    let mut terms = Vec::with_capacity(scorers.len());
    for s in scorers {
        let v = s.score(img, path).map_err(|e| match e {
            Error::Scorer { .. } => e,
            other => Error::Scorer { id: s.id().to_string(), reason: other.to_string() },
        })?;
        if !v.is_finite() {
            return Err(Error::Scorer { id: s.id().to_string(), reason: format!("non-finite score {v}") });
        }
        terms.push((s.id().to_string(), v));
    }
    let total = terms.iter().map(|(_, v)| v).sum();
    Ok(QualityBreakdown { terms, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    struct Fixed(&'static str, f64);

    impl QualityScorer for Fixed {
        fn id(&self) -> &str {
            self.0
        }
        fn range(&self) -> (f64, f64) {
            (0.0, 1.0)
        }
        fn score(&self, _: &ImageTensor, _: Option<&str>) -> Result<f64> {
            Ok(self.1)
        }
    }

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> ImageTensor {
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let v = f(y, x);
                data.extend([v, v, v]);
            }
        }
        ImageTensor::new(h, w, data).unwrap()
    }

    #[test]
    fn constant_image_has_zero_entropy() {
        let t = ceiq_terms(&ImageTensor::filled(8, 8, [0.4, 0.4, 0.4]).unwrap());
        assert_eq!(t.entropy_bits, 0.0);
        assert!((t.similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_histogram_is_near_fixed_point() {
        // One pixel per luminance bin, centred in the bin.
        let img = gray(16, 16, |y, x| ((y * 16 + x) as f64 + 0.5) / 256.0);
        let t = ceiq_terms(&img);
        assert!((t.entropy_bits - 8.0).abs() < 1e-12);
        assert!(t.similarity > 0.999, "{}", t.similarity);
    }

    #[test]
    fn matches_scalar_oracle() {
        let mut r = rng::stream(11, &[]);
        for _ in 0..10 {
            let data: Vec<f64> = (0..12 * 9 * 3).map(|_| r.random::<f64>()).collect();
            let img = ImageTensor::new(12, 9, data.clone()).unwrap();
            let n = 12 * 9;

            let lum: Vec<f64> = data
                .chunks(3)
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect();
            let mut counts = vec![0.0f64; 256];
            for &y in &lum {
                let mut b = 0;
                while b < 255 && y >= (b + 1) as f64 / 256.0 {
                    b += 1;
                }
                counts[b] += 1.0;
            }
            let mut entropy = 0.0;
            for &c in &counts {
                if c > 0.0 {
                    entropy -= c / n as f64 * (c / n as f64).ln() / 2f64.ln();
                }
            }
            let first = counts.iter().position(|&c| c > 0.0).unwrap();
            let cdf_min = counts[first];
            let eq: Vec<f64> = lum
                .iter()
                .map(|&y| {
                    let b = luma_bin(y);
                    let cdf: f64 = counts[..=b].iter().sum();
                    (cdf - cdf_min) / (n as f64 - cdf_min)
                })
                .collect();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
            let (ma, mb) = (mean(&lum), mean(&eq));
            let mut sums = [0.0; 3];
            for i in 0..n {
                sums[0] += (lum[i] - ma).powi(2);
                sums[1] += (eq[i] - mb).powi(2);
                sums[2] += (lum[i] - ma) * (eq[i] - mb);
            }
            let [va, vb, cv] = sums.map(|s| s / n as f64);
            let ssim = (2.0 * ma * mb + 1e-4) * (2.0 * cv + 9e-4)
                / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4));
            let expect = 0.5 * ssim.clamp(0.0, 1.0) + 0.5 * entropy / 8.0;
            assert!((ceiq_proxy(&img) - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn reward_quality_sums() {
        let img = ImageTensor::filled(2, 2, [0.5; 3]).unwrap();
        let one: Vec<Box<dyn QualityScorer>> = vec![Box::new(Fixed("a", 0.7))];
        assert_eq!(reward_quality(&img, None, &one).unwrap().total, 0.7);
        let two: Vec<Box<dyn QualityScorer>> = vec![Box::new(Fixed("a", 0.7)), Box::new(Fixed("b", 0.4))];
        let b = reward_quality(&img, None, &two).unwrap();
        assert!((b.total - 1.1).abs() < 1e-15);
        assert_eq!(b.terms.len(), 2);
        assert!(reward_quality(&img, None, &[]).is_err());
    }

    #[test]
    fn external_scores_from_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("liqe.csv");
        std::fs::write(&path, "path,score\nsmoky/0000.ppm,0.25\nsmoky/0001.ppm,0.75\n").unwrap();
        let s = ExternalScores::from_csv("liqe", (0.0, 1.0), &path).unwrap();
        let img = ImageTensor::filled(2, 2, [0.5; 3]).unwrap();
        assert_eq!(s.score(&img, Some("smoky/0001.ppm")).unwrap(), 0.75);
        let scorers: Vec<Box<dyn QualityScorer>> = vec![Box::new(CeiqProxy), Box::new(s)];
        match reward_quality(&img, Some("smoky/0002.ppm"), &scorers) {
            Err(Error::Scorer { id, .. }) => assert_eq!(id, "liqe"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn normalization_is_affine() {
        let img = ImageTensor::filled(2, 2, [0.5; 3]).unwrap();
        let n = Normalized { inner: Fixed("a", 0.5), scale: -2.0, offset: 1.0 };
        assert_eq!(n.score(&img, None).unwrap(), 0.0);
        assert_eq!(n.range(), (-1.0, 1.0));
    }

    proptest! {
        #[test]
        fn reward_is_additive_and_order_free(vals in prop::collection::vec(-5.0f64..5.0, 1..6)) {
            const IDS: [&str; 6] = ["a", "b", "c", "d", "e", "f"];
            let img = ImageTensor::filled(2, 2, [0.5; 3]).unwrap();
            let fwd: Vec<Box<dyn QualityScorer>> =
                vals.iter().enumerate().map(|(i, &v)| Box::new(Fixed(IDS[i], v)) as _).collect();
            let rev: Vec<Box<dyn QualityScorer>> =
                vals.iter().enumerate().rev().map(|(i, &v)| Box::new(Fixed(IDS[i], v)) as _).collect();
            let a = reward_quality(&img, None, &fwd).unwrap().total;
            let b = reward_quality(&img, None, &rev).unwrap().total;
            let direct: f64 = vals.iter().sum();
            prop_assert!((a - direct).abs() < 1e-12);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn two_tone_beats_its_gray_blend(lo in 0.0f64..0.3, hi in 0.7f64..1.0, s in 0.05f64..0.95) {
            let two_tone = |k: f64| gray(8, 8, move |y, x| {
                let v = if (y + x) % 2 == 0 { lo } else { hi };
                k * v + (1.0 - k) * 0.5
            });
            let sharp = ceiq_terms(&two_tone(1.0));
            let blended = ceiq_terms(&two_tone(s));
            prop_assert!(sharp.score > blended.score);
            prop_assert!(sharp.similarity > blended.similarity);
            prop_assert!(sharp.entropy_bits >= blended.entropy_bits);
        }
    }
}
