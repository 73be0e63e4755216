//! Manifests, embedding files, synthetic pair generation and real-pair
//! ingestion.

mod embeddings;
pub mod toy;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use embeddings::EmbeddingFile;

use crate::error::{Error, Result};
use crate::noise::{apply_noise, NoiseSource};
use crate::raw::{invert_isp, read_rgb, IspParams, RawImage};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::training::{Batch, BatchSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// Exposure settings of one capture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptureMeta {
    pub iso: u32,
    pub exposure_s: f64,
}

/// Fast, high-gain capture of a pair.
pub const NOISY_CAPTURE: CaptureMeta = CaptureMeta {
    iso: 3200,
    exposure_s: 1.0 / 12000.0,
};

/// Slow, low-gain reference capture of a pair.
pub const CLEAN_CAPTURE: CaptureMeta = CaptureMeta {
    iso: 50,
    exposure_s: 1.0 / 50.0,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// RGB image (`.png`/`.ppm`) or raw file (`.rdrw`), relative to the manifest.
    pub clean: String,
    /// Captured noisy raw; present only for real pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy: Option<String>,
    pub embedding_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub isp: Option<IspParams>,
    #[serde(default)]
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_meta: Option<CaptureMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy_meta: Option<CaptureMeta>,
    /// Scalar applied to the noisy capture to match the clean exposure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_gain: Option<f64>,
}

impl ManifestEntry {
    pub fn synthetic(id: impl Into<String>, clean: impl Into<String>, embedding_index: usize) -> Self {
        ManifestEntry {
            id: id.into(),
            clean: clean.into(),
            noisy: None,
            embedding_index,
            isp: None,
            split: Split::Train,
            clean_meta: None,
            noisy_meta: None,
            pair_gain: None,
        }
    }

    pub fn is_pair(&self) -> bool {
        self.noisy.is_some()
    }

    pub fn isp(&self) -> IspParams {
        self.isp.clone().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Embedding file path relative to the manifest.
    pub embeddings: String,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(&std::fs::read(path)?)?;
        m.check_ids()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Malformed {
                    what: "manifest",
                    detail: format!("duplicate id {}", e.id),
                });
            }
        }
        Ok(())
    }

    /// Checks ids and embedding indices against `embeddings`.
    pub fn validate(&self, embeddings: &EmbeddingFile) -> Result<()> {
        self.check_ids()?;
        for e in &self.entries {
            if e.embedding_index >= embeddings.count() {
                return Err(Error::Malformed {
                    what: "manifest",
                    detail: format!(
                        "{}: embedding index {} but the file holds {}",
                        e.id,
                        e.embedding_index,
                        embeddings.count()
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// A manifest with its directory and embeddings loaded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub root: PathBuf,
    pub embeddings: EmbeddingFile,
}

impl Dataset {
    /// `cond_dim` enforces the embedding dimension (768 for text mode).
    pub fn open(manifest_path: impl AsRef<Path>, cond_dim: Option<usize>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let manifest = Manifest::load(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let embeddings = EmbeddingFile::load(root.join(&manifest.embeddings), cond_dim)?;
        manifest.validate(&embeddings)?;
        Ok(Dataset {
            manifest,
            root,
            embeddings,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn cond(&self, entry: &ManifestEntry) -> Result<Tensor> {
        self.embeddings.gather(&[entry.embedding_index])
    }

    /// Clean raw for `entry`: read directly, or unprocessed from RGB.
    pub fn load_clean(&self, entry: &ManifestEntry) -> Result<RawImage> {
        let path = self.path(&entry.clean);
        if is_raw_path(&path) {
            RawImage::load(path)
        } else {
            invert_isp(&read_rgb(path)?, &entry.isp())
        }
    }

    pub fn make_synthetic_sample(
        &self,
        entry: &ManifestEntry,
        noise: &NoiseSource,
        patch: usize,
        rng: &mut Rng,
    ) -> Result<Sample> {
        let clean = self.load_clean(entry)?;
        synthesize(&clean, Some(self.cond(entry)?), noise, patch, rng)
    }

    pub fn load_real_pair(&self, entry: &ManifestEntry) -> Result<RealPair> {
        let noisy_rel = entry.noisy.as_ref().ok_or_else(|| Error::Malformed {
            what: "manifest",
            detail: format!("{} has no noisy capture", entry.id),
        })?;
        let clean = RawImage::load(self.path(&entry.clean))?;
        let noisy = RawImage::load(self.path(noisy_rel))?;
        let noisy = apply_pair_gain(&clean, noisy, entry.pair_gain)?;
        Ok(RealPair {
            id: entry.id.clone(),
            x0: clean,
            y: noisy,
            cond: self.cond(entry)?,
            clean_meta: entry.clean_meta.unwrap_or(CLEAN_CAPTURE),
            noisy_meta: entry.noisy_meta.unwrap_or(NOISY_CAPTURE),
        })
    }
}

pub fn is_raw_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("rdrw"))
}

/// Clean/noisy raw crop with its condition vector (`[1, dim]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x0: RawImage,
    pub y: RawImage,
    pub cond: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealPair {
    pub id: String,
    pub x0: RawImage,
    pub y: RawImage,
    pub cond: Tensor,
    pub clean_meta: CaptureMeta,
    pub noisy_meta: CaptureMeta,
}

/// Even-aligned random crop offset `(top, left)` for a `patch x patch` crop.
pub fn crop_offset(raw: &RawImage, patch: usize, rng: &mut Rng) -> Result<(usize, usize)> {
    if patch == 0 || patch % 2 != 0 {
        return Err(Error::invalid(format!("patch size {patch} must be even and positive")));
    }
    if raw.height() < patch || raw.width() < patch {
        return Err(Error::invalid(format!(
            "image {}x{} is smaller than patch {patch}",
            raw.height(),
            raw.width()
        )));
    }
    let top = 2 * rng.gen_range(0..=(raw.height() - patch) / 2);
    let left = 2 * rng.gen_range(0..=(raw.width() - patch) / 2);
    Ok((top, left))
}

/// Random Bayer-aligned crop of `clean`, then noise drawn from `noise`.
pub fn synthesize(clean: &RawImage, cond: Option<Tensor>, noise: &NoiseSource, patch: usize, rng: &mut Rng) -> Result<Sample> {
    let (top, left) = crop_offset(clean, patch, rng)?;
    let x0 = clean.crop(top, left, patch, patch)?;
    let params = noise.draw(rng);
    let y = apply_noise(&x0, &params, rng)?;
    Ok(Sample { x0, y, cond })
}

/// Least-squares gain `g` minimising `(mean(clean) - g mean(noisy))^2`.
pub fn fit_pair_gain(clean: &RawImage, noisy: &RawImage) -> Result<f64> {
    if !clean.same_extents(noisy) {
        return Err(extent_error(clean, noisy));
    }
    let (mc, mn) = (clean.planes().mean(), noisy.planes().mean());
    if mn.abs() < 1e-12 {
        return Err(Error::Singular("noisy capture has zero mean".into()));
    }
    Ok(mc / mn)
}

fn extent_error(a: &RawImage, b: &RawImage) -> Error {
    Error::Malformed {
        what: "raw pair",
        detail: format!(
            "extents differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        ),
    }
}

fn apply_pair_gain(clean: &RawImage, noisy: RawImage, gain: Option<f64>) -> Result<RawImage> {
    if !clean.same_extents(&noisy) {
        return Err(extent_error(clean, &noisy));
    }
    match gain {
        Some(g) if g != 1.0 => noisy.with_planes(noisy.planes().map(|v| g * v)),
        _ => Ok(noisy),
    }
}

fn stack_samples(items: Vec<Sample>) -> Result<Batch> {
    let x0 = Tensor::stack(&items.iter().map(|s| s.x0.planes().clone()).collect::<Vec<_>>())?;
    let y = Tensor::stack(&items.iter().map(|s| s.y.planes().clone()).collect::<Vec<_>>())?;
    let cond = if items.iter().all(|s| s.cond.is_some()) {
        let rows: Vec<f64> = items
            .iter()
            .flat_map(|s| s.cond.as_ref().unwrap().data().to_vec())
            .collect();
        let dim = rows.len() / items.len();
        Some(Tensor::new([items.len(), dim], rows)?)
    } else {
        None
    };
    Ok(Batch { x0, y, cond })
}

/// Fresh crops and fresh noise every batch from a pool of clean raws.
pub struct SyntheticSource {
    pool: Vec<(RawImage, Tensor)>,
    noise: NoiseSource,
    patch: usize,
    rng: Rng,
}

impl SyntheticSource {
    pub fn new(pool: Vec<(RawImage, Tensor)>, noise: NoiseSource, patch: usize, rng: Rng) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::invalid("synthetic source needs at least one image"));
        }
        Ok(SyntheticSource {
            pool,
            noise,
            patch,
            rng,
        })
    }

    /// Loads and unprocesses every entry of `split`. For pairs only the
    /// clean capture is used.
    pub fn from_dataset(ds: &Dataset, split: Split, noise: NoiseSource, patch: usize, rng: Rng) -> Result<Self> {
        let pool = ds
            .manifest
            .split(split)
            .map(|e| Ok((ds.load_clean(e)?, ds.cond(e)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(pool, noise, patch, rng)
    }
}

impl BatchSource for SyntheticSource {
    fn next_batch(&mut self, batch_size: usize) -> Result<Batch> {
        let mut items = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let i = self.rng.gen_range(0..self.pool.len());
            let (clean, cond) = &self.pool[i];
            items.push(synthesize(clean, Some(cond.clone()), &self.noise, self.patch, &mut self.rng)?);
        }
        stack_samples(items)
    }
}

/// Random aligned crops of fixed clean/noisy pairs.
pub struct PairSource {
    pairs: Vec<Sample>,
    patch: usize,
    rng: Rng,
}

impl PairSource {
    pub fn new(pairs: Vec<Sample>, patch: usize, rng: Rng) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("pair source needs at least one pair"));
        }
        for p in &pairs {
            if !p.x0.same_extents(&p.y) {
                return Err(extent_error(&p.x0, &p.y));
            }
        }
        Ok(PairSource { pairs, patch, rng })
    }

    pub fn from_dataset(ds: &Dataset, split: Split, patch: usize, rng: Rng) -> Result<Self> {
        let pairs = ds
            .manifest
            .split(split)
            .filter(|e| e.is_pair())
            .map(|e| {
                let p = ds.load_real_pair(e)?;
                Ok(Sample {
                    x0: p.x0,
                    y: p.y,
                    cond: Some(p.cond),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pairs, patch, rng)
    }
}

impl BatchSource for PairSource {
    fn next_batch(&mut self, batch_size: usize) -> Result<Batch> {
        let mut items = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let p = &self.pairs[self.rng.gen_range(0..self.pairs.len())];
            let (top, left) = crop_offset(&p.x0, self.patch, &mut self.rng)?;
            items.push(Sample {
                x0: p.x0.crop(top, left, self.patch, self.patch)?,
                y: p.y.crop(top, left, self.patch, self.patch)?,
                cond: p.cond.clone(),
            });
        }
        stack_samples(items)
    }
}

/// Stacks fixed samples into one batch.
pub fn batch_of(samples: &[Sample]) -> Result<Batch> {
    stack_samples(samples.to_vec())
}
