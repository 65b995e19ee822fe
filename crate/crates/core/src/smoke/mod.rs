//! Synthetic smoke degradation.
//!
//! Clean patches are procedural tissue-like textures (smooth multi-hue color
//! fields crossed by darker vessel curves). Smoke is applied with the
//! scattering model `I = J * t + A * (1 - t)` where the transmission
//! `t = exp(-density * f)` comes from a smooth nonnegative random field `f`.

mod corpus;

pub use corpus::{
    image_name, read_corpus, read_image_dir, write_corpus, CorpusManifest, CorpusSplit, LoadedCorpus,
};

use std::f64::consts::TAU;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{corpus_hash, ImageTensor, CHANNELS};
use crate::rng::{self, StreamRng};

/// Fraction of a paired corpus assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

const SMOKE_MODES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmokeConfig {
    /// Smoke color.
    pub airlight: [f64; 3],
    pub density: f64,
    /// Correlation length of the transmission field, in pixels.
    pub smoothness: f64,
    pub seed: u64,
}

impl Default for SmokeConfig {
    fn default() -> Self {
        Self { airlight: [0.92, 0.92, 0.95], density: 1.0, smoothness: 8.0, seed: 0 }
    }
}

impl SmokeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.airlight.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config(format!("airlight {:?} outside [0, 1]", self.airlight)));
        }
        if !(self.density >= 0.0 && self.density.is_finite()) {
            return Err(Error::Config(format!("density {} must be >= 0", self.density)));
        }
        if !(self.smoothness >= 1.0 && self.smoothness.is_finite()) {
            return Err(Error::Config(format!("smoothness {} must be >= 1", self.smoothness)));
        }
        Ok(())
    }
}

/// One term `amp * (1 + cos(kx*x + ky*y + phase)) / 2` of the smoke field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineMode {
    pub amp: f64,
    pub kx: f64,
    pub ky: f64,
    pub phase: f64,
}

/// Nonnegative low-frequency field: the average of a few cosine modes.
#[derive(Debug, Clone, PartialEq)]
pub struct SmokeField {
    pub modes: Vec<CosineMode>,
}

impl SmokeField {
    pub fn random(rng: &mut StreamRng, smoothness: f64) -> Self {
        let modes = (0..SMOKE_MODES)
            .map(|_| {
                let wavelength = smoothness * rng.random_range(1.0..2.0);
                let k = TAU / wavelength;
                let angle = rng.random_range(0.0..TAU);
                CosineMode {
                    amp: rng.random_range(0.5..1.5),
                    kx: k * angle.cos(),
                    ky: k * angle.sin(),
                    phase: rng.random_range(0.0..TAU),
                }
            })
            .collect();
        Self { modes }
    }

    /// The field used by [`synth_transmission`] for a given config.
    pub fn for_config(cfg: &SmokeConfig) -> Self {
        Self::random(&mut rng::stream(cfg.seed, &[rng::TAG_SMOKE]), cfg.smoothness)
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let sum: f64 = self
            .modes
            .iter()
            .map(|m| m.amp * 0.5 * (1.0 + (m.kx * x + m.ky * y + m.phase).cos()))
            .sum();
        sum / self.modes.len() as f64
    }
}

/// Per-pixel transmission in `(0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl TransmissionMap {
    pub fn constant(height: usize, width: usize, t: f64) -> Self {
        Self { height, width, values: vec![t; height * width] }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

fn transmission_from_field(field: &SmokeField, density: f64, h: usize, w: usize) -> TransmissionMap {
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            values.push((-density * field.eval(x as f64, y as f64)).exp());
        }
    }
    TransmissionMap { height: h, width: w, values }
}

pub fn synth_transmission(cfg: &SmokeConfig, h: usize, w: usize) -> Result<TransmissionMap> {
    cfg.validate()?;
    if h < 2 || w < 2 {
        return Err(Error::dim(format!("transmission map must be at least 2x2, got {h}x{w}")));
    }
    Ok(transmission_from_field(&SmokeField::for_config(cfg), cfg.density, h, w))
}

pub fn apply_smoke(
    clean: &ImageTensor,
    t: &TransmissionMap,
    airlight: [f64; 3],
) -> Result<ImageTensor> {
    if clean.height() != t.height || clean.width() != t.width {
        return Err(Error::dim(format!(
            "image {}x{} vs transmission {}x{}",
            clean.height(),
            clean.width(),
            t.height,
            t.width
        )));
    }
    let data = clean
        .data()
        .chunks_exact(CHANNELS)
        .zip(&t.values)
        .flat_map(|(px, &tv)| {
            (0..CHANNELS).map(move |c| px[c] * tv + airlight[c] * (1.0 - tv))
        })
        .collect();
    ImageTensor::from_clamped(clean.height(), clean.width(), data)
}

/// Supplies clean patches by index.
pub trait CleanSource: Sync {
    fn patch(&self, index: usize, h: usize, w: usize) -> Result<ImageTensor>;
}

/// Procedural tissue: a reddish base color with smooth per-channel variation
/// and one to three darker vessel curves.
#[derive(Debug, Clone, Copy)]
pub struct ProceduralTissue {
    pub seed: u64,
}

impl CleanSource for ProceduralTissue {
    fn patch(&self, index: usize, h: usize, w: usize) -> Result<ImageTensor> {
        let mut rng = rng::stream(self.seed, &[rng::TAG_CLEAN, index as u64]);
        tissue_texture(&mut rng, h, w)
    }
}

struct Vessel {
    offset: f64,
    amplitude: f64,
    freq: f64,
    phase: f64,
    width: f64,
    darkness: f64,
    vertical: bool,
}

pub fn tissue_texture(rng: &mut StreamRng, h: usize, w: usize) -> Result<ImageTensor> {
    let base = [
        rng.random_range(0.55..0.85),
        rng.random_range(0.20..0.45),
        rng.random_range(0.15..0.40),
    ];
    let scale = h.max(w) as f64;
    let variation: Vec<Vec<CosineMode>> = (0..CHANNELS)
        .map(|_| {
            (0..3)
                .map(|_| {
                    let k = TAU / (scale * rng.random_range(0.5..1.5));
                    let angle = rng.random_range(0.0..TAU);
                    CosineMode {
                        amp: rng.random_range(0.03..0.12),
                        kx: k * angle.cos(),
                        ky: k * angle.sin(),
                        phase: rng.random_range(0.0..TAU),
                    }
                })
                .collect()
        })
        .collect();
    let n_vessels = rng.random_range(1..=3);
    let vessels: Vec<Vessel> = (0..n_vessels)
        .map(|_| Vessel {
            offset: rng.random_range(0.15..0.85),
            amplitude: rng.random_range(0.05..0.25),
            freq: rng.random_range(0.5..2.0),
            phase: rng.random_range(0.0..TAU),
            width: rng.random_range(0.6..1.6),
            darkness: rng.random_range(0.3..0.65),
            vertical: rng.random_bool(0.5),
        })
        .collect();

    ImageTensor::from_fn(h, w, |y, x, c| {
        let (fy, fx) = (y as f64, x as f64);
        let mut v = base[c];
        for m in &variation[c] {
            v += m.amp * (m.kx * fx + m.ky * fy + m.phase).cos();
        }
        for vs in &vessels {
            let (along, across, len_along, len_across) = if vs.vertical {
                (fy, fx, h as f64, w as f64)
            } else {
                (fx, fy, w as f64, h as f64)
            };
            let center = len_across
                * (vs.offset + vs.amplitude * (TAU * vs.freq * along / len_along + vs.phase).sin());
            let d = (across - center) / vs.width;
            let strength = vs.darkness * (-d * d).exp();
            // Vessels darken green and blue more than red.
            let keep = if c == 0 { 1.0 - 0.5 * strength } else { 1.0 - strength };
            v *= keep;
        }
        v.clamp(0.0, 1.0)
    })
}

#[derive(Debug, Clone)]
pub struct PairedSample {
    pub clean: ImageTensor,
    pub smoky: ImageTensor,
    pub transmission: TransmissionMap,
}

#[derive(Debug, Clone)]
pub struct PairedCorpus {
    pub config: SmokeConfig,
    pub samples: Vec<PairedSample>,
    pub split: CorpusSplit,
}

impl PairedCorpus {
    pub fn train(&self) -> impl Iterator<Item = &PairedSample> {
        self.split.train.iter().map(|&i| &self.samples[i])
    }

    pub fn val(&self) -> impl Iterator<Item = &PairedSample> {
        self.split.val.iter().map(|&i| &self.samples[i])
    }

    /// Hash over clean then smoky images, in index order.
    pub fn hash(&self) -> String {
        corpus_hash(
            self.samples
                .iter()
                .map(|s| &s.clean)
                .chain(self.samples.iter().map(|s| &s.smoky)),
        )
    }
}

pub fn split_indices(n: usize) -> CorpusSplit {
    let n_train = ((n as f64) * TRAIN_FRACTION).round().max(1.0).min(n as f64) as usize;
    CorpusSplit {
        train_fraction: TRAIN_FRACTION,
        train: (0..n_train).collect(),
        val: (n_train..n).collect(),
    }
}

fn smoke_for_index(
    cfg: &SmokeConfig,
    tag: u64,
    index: usize,
    density: f64,
    h: usize,
    w: usize,
) -> TransmissionMap {
    let mut rng = rng::stream(cfg.seed, &[tag, index as u64]);
    let field = SmokeField::random(&mut rng, cfg.smoothness);
    transmission_from_field(&field, density, h, w)
}

/// Paired clean/smoky corpus. Sample `i` depends only on `(cfg.seed, i)`.
pub fn gen_corpus(
    cfg: &SmokeConfig,
    n: usize,
    h: usize,
    w: usize,
    clean_source: &dyn CleanSource,
) -> Result<PairedCorpus> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    if h < 2 || w < 2 {
        return Err(Error::dim(format!("patches must be at least 2x2, got {h}x{w}")));
    }
    let samples = (0..n)
        .into_par_iter()
        .map(|i| {
            let clean = clean_source.patch(i, h, w)?;
            let transmission = smoke_for_index(cfg, rng::TAG_SMOKE, i, cfg.density, h, w);
            let smoky = apply_smoke(&clean, &transmission, cfg.airlight)?;
            Ok(PairedSample { clean, smoky, transmission })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PairedCorpus { config: cfg.clone(), samples, split: split_indices(n) })
}

/// Smoky-only patches for unpaired refinement. Clean content and smoke come
/// from streams disjoint from [`gen_corpus`], and each patch draws its density
/// from `[0.5, 1.5] * cfg.density`.
pub fn gen_unpaired(cfg: &SmokeConfig, n: usize, h: usize, w: usize) -> Result<Vec<ImageTensor>> {
    cfg.validate()?;
    if h < 2 || w < 2 {
        return Err(Error::dim(format!("patches must be at least 2x2, got {h}x{w}")));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(cfg.seed, &[rng::TAG_UNPAIRED, i as u64]);
            let clean = tissue_texture(&mut rng, h, w)?;
            let density = cfg.density * rng.random_range(0.5..1.5);
            let field = SmokeField::random(&mut rng, cfg.smoothness);
            let t = transmission_from_field(&field, density, h, w);
            apply_smoke(&clean, &t, cfg.airlight)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(density: f64) -> SmokeConfig {
        SmokeConfig { density, seed: 42, ..SmokeConfig::default() }
    }

    #[test]
    fn zero_density_is_clear() {
        let t = synth_transmission(&cfg(0.0), 8, 8).unwrap();
        assert!(t.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn transmission_is_deterministic() {
        let a = synth_transmission(&cfg(1.3), 9, 7).unwrap();
        let b = synth_transmission(&cfg(1.3), 9, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.values.iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn transmission_matches_mode_sum_oracle() {
        let c = cfg(2.0);
        let t = synth_transmission(&c, 6, 5).unwrap();
        let field = SmokeField::random(&mut rng::stream(c.seed, &[rng::TAG_SMOKE]), c.smoothness);
        for y in 0..6 {
            for x in 0..5 {
                let mut f = 0.0;
                for m in &field.modes {
                    let arg = m.kx * x as f64 + m.ky * y as f64 + m.phase;
                    f += m.amp * (1.0 + arg.cos()) / 2.0;
                }
                f /= field.modes.len() as f64;
                assert!((t.values[y * 5 + x] - (-2.0 * f).exp()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bad_config_rejected() {
        assert!(synth_transmission(&SmokeConfig { density: -1.0, ..cfg(0.0) }, 4, 4).is_err());
        assert!(synth_transmission(&SmokeConfig { smoothness: 0.5, ..cfg(1.0) }, 4, 4).is_err());
        assert!(synth_transmission(&cfg(1.0), 1, 4).is_err());
    }

    #[test]
    fn apply_smoke_limits() {
        let clean = ImageTensor::filled(3, 3, [0.2; 3]).unwrap();
        let a = [1.0, 0.9, 0.8];
        let one = apply_smoke(&clean, &TransmissionMap::constant(3, 3, 1.0), a).unwrap();
        assert_eq!(one, clean);
        let zero = apply_smoke(&clean, &TransmissionMap::constant(3, 3, 0.0), a).unwrap();
        assert_eq!(zero, ImageTensor::filled(3, 3, a).unwrap());
        let half = apply_smoke(&clean, &TransmissionMap::constant(3, 3, 0.5), [1.0; 3]).unwrap();
        assert!(half.data().iter().all(|&v| (v - 0.6).abs() < 1e-15));
        assert!(apply_smoke(&clean, &TransmissionMap::constant(2, 3, 0.5), a).is_err());
    }

    #[test]
    fn corpus_single_pair() {
        let c = gen_corpus(&cfg(1.0), 1, 8, 8, &ProceduralTissue { seed: 42 }).unwrap();
        assert_eq!(c.samples.len(), 1);
        assert_eq!(c.split.train, vec![0]);
        assert!(c.split.val.is_empty());
    }

    #[test]
    fn corpus_is_deterministic() {
        let src = ProceduralTissue { seed: 5 };
        let a = gen_corpus(&cfg(1.0), 6, 8, 8, &src).unwrap();
        let b = gen_corpus(&cfg(1.0), 6, 8, 8, &src).unwrap();
        assert_eq!(a.hash(), b.hash());
        let other = gen_corpus(&SmokeConfig { seed: 43, ..cfg(1.0) }, 6, 8, 8, &src).unwrap();
        assert_ne!(a.hash(), other.hash());
    }

    #[test]
    fn textures_are_multi_hue_and_non_constant() {
        let src = ProceduralTissue { seed: 1 };
        for i in 0..10 {
            let img = src.patch(i, 16, 16).unwrap();
            let s = crate::image::channel_stats(&img);
            assert!(s.sigma.iter().all(|&v| v > 1e-3), "{s:?}");
            assert!((s.mu[0] - s.mu[1]).abs() > 0.05, "{s:?}");
        }
    }

    #[test]
    fn mean_transmission_falls_with_density() {
        let src = ProceduralTissue { seed: 9 };
        let means: Vec<f64> = [0.5, 1.0, 2.0]
            .iter()
            .map(|&d| {
                let c = gen_corpus(&SmokeConfig { density: d, seed: 9, ..SmokeConfig::default() }, 100, 16, 16, &src)
                    .unwrap();
                c.samples.iter().map(|s| s.transmission.mean()).sum::<f64>() / 100.0
            })
            .collect();
        assert!(means[0] > means[1] && means[1] > means[2], "{means:?}");
    }

    #[test]
    fn unpaired_is_deterministic_and_distinct_from_pairs() {
        let c = cfg(1.0);
        let a = gen_unpaired(&c, 4, 8, 8).unwrap();
        assert_eq!(a, gen_unpaired(&c, 4, 8, 8).unwrap());
        let pairs = gen_corpus(&c, 4, 8, 8, &ProceduralTissue { seed: c.seed }).unwrap();
        assert_ne!(a[0], pairs.samples[0].smoky);
    }

    proptest! {
        #[test]
        fn smoke_is_a_convex_blend(
            j in proptest::array::uniform3(0.0f64..=1.0),
            a in proptest::array::uniform3(0.0f64..=1.0),
            t in 0.0f64..=1.0,
        ) {
            let clean = ImageTensor::filled(2, 2, j).unwrap();
            let out = apply_smoke(&clean, &TransmissionMap::constant(2, 2, t), a).unwrap();
            for c in 0..3 {
                let v = out.get(0, 0, c);
                let lo = j[c].min(a[c]) - 1e-15;
                let hi = j[c].max(a[c]) + 1e-15;
                prop_assert!(v >= lo && v <= hi);
            }
        }
    }
}
