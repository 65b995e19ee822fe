//! Image tensors and the per-channel statistics every reward is built from.
//!
//! Pixels are stored row-major and channel-interleaved: the value of channel
//! `c` at `(row, col)` lives at `(row * width + col) * 3 + c`. Intensities are
//! in `[0, 1]`.

mod ppm;

pub use ppm::{
    decode_ppm, encode_ppm, encode_ppm_with_comment, read_ppm, write_ppm, write_ppm_with_comment,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Reported in place of +inf when two images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    /// Builds an image from interleaved RGB data. Every value must be finite
    /// and inside `[0, 1]`; use [`ImageTensor::from_clamped`] for raw model
    /// outputs.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, data.len())?;
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain(format!(
                "intensity {} at index {i} outside [0, 1]",
                data[i]
            )));
        }
        Ok(Self { height, width, data })
    }

    /// Clamps every value into `[0, 1]`. NaN is rejected.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, data.len())?;
        crate::error::ensure_finite("image data", &data)?;
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn transpose(&self) -> ImageTensor {
        let (h, w) = (self.width, self.height);
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..h {
            for x in 0..w {
                for c in 0..CHANNELS {
                    data.push(self.get(x, y, c));
                }
            }
        }
        ImageTensor { height: h, width: w, data }
    }

    /// Luminance `0.299 R + 0.587 G + 0.114 B` per pixel.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(CHANNELS)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// SHA-256 over the dimensions and the little-endian bits of every value.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        hash_into(&mut h, self);
        hex::encode(h.finalize())
    }
}

fn check_dims(height: usize, width: usize, len: usize) -> Result<()> {
    if height < 2 || width < 2 {
        return Err(Error::dim(format!(
            "image must be at least 2x2, got {height}x{width}"
        )));
    }
    if len != height * width * CHANNELS {
        return Err(Error::dim(format!(
            "expected {} values for {height}x{width}x3, got {len}",
            height * width * CHANNELS
        )));
    }
    Ok(())
}

fn hash_into(h: &mut Sha256, img: &ImageTensor) {
    h.update((img.height as u64).to_le_bytes());
    h.update((img.width as u64).to_le_bytes());
    for v in &img.data {
        h.update(v.to_le_bytes());
    }
}

/// Order-sensitive hash of a list of images, used to name corpus snapshots.
pub fn corpus_hash<'a>(images: impl IntoIterator<Item = &'a ImageTensor>) -> String {
    let mut h = Sha256::new();
    let mut n = 0u64;
    for img in images {
        hash_into(&mut h, img);
        n += 1;
    }
    h.update(n.to_le_bytes());
    hex::encode(h.finalize())
}

/// Mean, population standard deviation and mean gradient magnitude per
/// channel, in R, G, B order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mu: [f64; 3],
    pub sigma: [f64; 3],
    pub grad: [f64; 3],
}

/// Gradients use forward differences with a replicated border (the last row
/// and column see a zero difference along that axis) and are averaged over
/// every pixel.
pub fn channel_stats(img: &ImageTensor) -> ChannelStats {
    let (h, w) = (img.height, img.width);
    let n = (h * w) as f64;
    let mut sum = [0.0; 3];
    for p in img.data.chunks_exact(CHANNELS) {
        for c in 0..CHANNELS {
            sum[c] += p[c];
        }
    }
    let mu = sum.map(|s| s / n);

    let mut var = [0.0; 3];
    for p in img.data.chunks_exact(CHANNELS) {
        for c in 0..CHANNELS {
            let d = p[c] - mu[c];
            var[c] += d * d;
        }
    }
    let sigma = var.map(|v| (v / n).sqrt());

    let mut grad = [0.0; 3];
    for y in 0..h {
        let yn = (y + 1).min(h - 1);
        for x in 0..w {
            let xn = (x + 1).min(w - 1);
            for (c, g) in grad.iter_mut().enumerate() {
                let v = img.get(y, x, c);
                let dx = img.get(y, xn, c) - v;
                let dy = img.get(yn, x, c) - v;
                *g += (dx * dx + dy * dy).sqrt();
            }
        }
    }
    let grad = grad.map(|g| g / n);

    ChannelStats { mu, sigma, grad }
}

/// Percentile with linear interpolation between order statistics
/// (rank `p/100 * (n-1)` on the sorted sample). `p` is in `[0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("percentile of an empty sample".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Domain(format!("percentile {p} outside [0, 100]")));
    }
    crate::error::ensure_finite("percentile sample", values)?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::dim(format!(
            "shape mismatch: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.data.len() as f64)
}

/// PSNR in dB with peak 1.0, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}
