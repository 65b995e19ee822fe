//! On-disk corpus layout:
//!
//! ```text
//! clean/NNNN.ppm
//! smoky/NNNN.ppm
//! unpaired/NNNN.ppm   (optional)
//! manifest.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PairedCorpus, PairedSample, SmokeConfig, TransmissionMap};
use crate::error::{Error, Result};
use crate::image::{corpus_hash, read_ppm, write_ppm, ImageTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train_fraction: f64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub config: SmokeConfig,
    pub height: usize,
    pub width: usize,
    pub pairs: usize,
    pub unpaired: usize,
    pub split: CorpusSplit,
    /// Hash of the paired images as written (after 8-bit quantization).
    pub corpus_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

pub fn image_name(index: usize) -> String {
    format!("{index:04}.ppm")
}

/// Writes the corpus and returns the manifest. The manifest hash is computed
/// over the quantized images so it matches what [`read_corpus`] sees.
pub fn write_corpus(
    dir: &Path,
    corpus: &PairedCorpus,
    unpaired: &[ImageTensor],
    config_hash: Option<String>,
) -> Result<CorpusManifest> {
    for sub in ["clean", "smoky"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    for (i, s) in corpus.samples.iter().enumerate() {
        write_ppm(&dir.join("clean").join(image_name(i)), &s.clean)?;
        write_ppm(&dir.join("smoky").join(image_name(i)), &s.smoky)?;
    }
    if !unpaired.is_empty() {
        fs::create_dir_all(dir.join("unpaired"))?;
        for (i, img) in unpaired.iter().enumerate() {
            write_ppm(&dir.join("unpaired").join(image_name(i)), img)?;
        }
    }
    let reread = read_pairs(dir, corpus.samples.len())?;
    let first = &corpus.samples[0].clean;
    let manifest = CorpusManifest {
        seed: corpus.config.seed,
        config: corpus.config.clone(),
        height: first.height(),
        width: first.width(),
        pairs: corpus.samples.len(),
        unpaired: unpaired.len(),
        split: corpus.split.clone(),
        corpus_hash: pair_hash(&reread),
        config_hash,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

fn pair_hash(pairs: &[(ImageTensor, ImageTensor)]) -> String {
    corpus_hash(pairs.iter().map(|p| &p.0).chain(pairs.iter().map(|p| &p.1)))
}

fn read_pairs(dir: &Path, n: usize) -> Result<Vec<(ImageTensor, ImageTensor)>> {
    (0..n)
        .map(|i| {
            Ok((
                read_ppm(&dir.join("clean").join(image_name(i)))?,
                read_ppm(&dir.join("smoky").join(image_name(i)))?,
            ))
        })
        .collect()
}

/// A corpus loaded back from disk. Transmission maps are not stored, so the
/// returned samples carry a unit placeholder map.
pub struct LoadedCorpus {
    pub manifest: CorpusManifest,
    pub pairs: PairedCorpus,
    pub unpaired: Vec<ImageTensor>,
}

pub fn read_corpus(dir: &Path) -> Result<LoadedCorpus> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: CorpusManifest = serde_json::from_str(&text)?;
    let pairs = read_pairs(dir, manifest.pairs)?;
    let hash = pair_hash(&pairs);
    if hash != manifest.corpus_hash {
        return Err(Error::Format {
            what: "corpus",
            reason: format!("hash mismatch: manifest {} vs files {hash}", manifest.corpus_hash),
        });
    }
    let unpaired = (0..manifest.unpaired)
        .map(|i| read_ppm(&dir.join("unpaired").join(image_name(i))))
        .collect::<Result<Vec<_>>>()?;
    let samples = pairs
        .into_iter()
        .map(|(clean, smoky)| PairedSample {
            transmission: TransmissionMap::constant(clean.height(), clean.width(), 1.0),
            clean,
            smoky,
        })
        .collect();
    Ok(LoadedCorpus {
        pairs: PairedCorpus {
            config: manifest.config.clone(),
            samples,
            split: manifest.split.clone(),
        },
        manifest,
        unpaired,
    })
}

/// Every `*.ppm` in a directory, sorted by file name.
pub fn read_image_dir(dir: &Path) -> Result<Vec<(PathBuf, ImageTensor)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let img = read_ppm(&p)?;
            Ok((p, img))
        })
        .collect()
}
