//! Versioned binary checkpoints.
//!
//! ```text
//! magic        8 bytes   "DSMKCKPT"
//! version      u32 LE
//! meta_len     u32 LE
//! meta         meta_len bytes of UTF-8 JSON (model, schedule, concept, ...)
//! n_params     u64 LE
//! params       n_params x f64 LE
//! n_moments    u64 LE    0, or 2 * n_params when optimizer state is present
//! moments      n_moments x f64 LE (first moments, then second moments)
//! checksum     32 bytes  SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::denoiser::{Denoiser, ModelConfig, PolicyParams};
use super::schedule::ScheduleConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DSMKCKPT";
const VERSION: u32 = 1;

/// Adam optimizer state carried across resumes.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub steps: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    schedule: ScheduleConfig,
    concept: Vec<f64>,
    step: u64,
    adam_steps: u64,
    config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub concept: Vec<f64>,
    /// Training steps completed when the checkpoint was written.
    pub step: u64,
    pub config_hash: Option<String>,
    pub params: PolicyParams,
    pub optimizer: Option<AdamMoments>,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format { what: "checkpoint", reason: reason.into() }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad("truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| bad("length overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn denoiser(&self) -> Result<Denoiser> {
        Denoiser::new(self.model.clone(), Some(self.concept.clone()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            model: self.model.clone(),
            schedule: self.schedule,
            concept: self.concept.clone(),
            step: self.step,
            adam_steps: self.optimizer.as_ref().map_or(0, |o| o.steps),
            config_hash: self.config_hash.clone(),
        };
        let meta = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(64 + meta.len() + 8 * 3 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in self.params.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        match &self.optimizer {
            Some(opt) => {
                if opt.m.len() != self.params.len() || opt.v.len() != self.params.len() {
                    return Err(Error::dim("optimizer moments do not match parameter count"));
                }
                out.extend_from_slice(&(2 * self.params.len() as u64).to_le_bytes());
                for v in opt.m.iter().chain(&opt.v) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => out.extend_from_slice(&0u64.to_le_bytes()),
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 {
            return Err(bad("file too short"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { bytes: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)?;
        let n = r.u64()? as usize;
        let params = PolicyParams(r.f64s(n)?);
        let n_mom = r.u64()? as usize;
        let optimizer = match n_mom {
            0 => None,
            k if k == 2 * n => {
                let m = r.f64s(n)?;
                let v = r.f64s(n)?;
                Some(AdamMoments { steps: meta.adam_steps, m, v })
            }
            k => return Err(bad(format!("moment block of {k} values for {n} params"))),
        };
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        let ckpt = Checkpoint {
            model: meta.model,
            schedule: meta.schedule,
            concept: meta.concept,
            step: meta.step,
            config_hash: meta.config_hash,
            params,
            optimizer,
        };
        let den = ckpt.denoiser()?;
        if den.param_count() != ckpt.params.len() {
            return Err(bad(format!(
                "{} parameters stored, model config needs {}",
                ckpt.params.len(),
                den.param_count()
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
