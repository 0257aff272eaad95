//! Dataset manifests, image/mask loading, and deterministic batching with
//! center or random cropping. Masks are always cropped with exactly the
//! offsets applied to their image.

mod synth;

pub use synth::{
    parse_objectives, synth_dataset, FakeMaskPolicy, ObjectiveSpec, SynthParams, SynthSummary,
};

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskgen::{self, Mask};
use crate::tensor::Tensor;

/// Where a sample's mask for one objective comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MaskSource {
    /// All pixels real.
    Zm,
    /// All pixels generated.
    Om,
    /// Convex hull of the sample's landmarks.
    Cvm,
    /// Grayscale PNG on disk, thresholded at 128.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: PathBuf,
    /// 0 = real, 1 = fake.
    pub label: u8,
    /// One mask source per objective (length k).
    pub masks: Vec<MaskSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub k: usize,
    pub objectives: Vec<String>,
    pub crop_size: usize,
    pub samples: Vec<SampleRecord>,
}

pub const MANIFEST_VERSION: u32 = 1;

impl Manifest {
    /// Structural validation plus existence checks for every referenced
    /// file, resolved relative to `dir`.
    pub fn validate(&self, dir: &Path) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::format(format!(
                "manifest version {} (supported: {MANIFEST_VERSION})",
                self.version
            )));
        }
        if self.objectives.len() != self.k {
            return Err(Error::format(format!(
                "manifest declares k={} but names {} objectives",
                self.k,
                self.objectives.len()
            )));
        }
        for (i, rec) in self.samples.iter().enumerate() {
            if rec.label > 1 {
                return Err(Error::format(format!(
                    "sample {i}: label {} outside {{0,1}}",
                    rec.label
                )));
            }
            if rec.masks.len() != self.k {
                return Err(Error::format(format!(
                    "sample {i}: {} mask sources for k={}",
                    rec.masks.len(),
                    self.k
                )));
            }
            let mut referenced: Vec<&PathBuf> = vec![&rec.image];
            for m in &rec.masks {
                match m {
                    MaskSource::File { path } => referenced.push(path),
                    MaskSource::Cvm if rec.landmarks.is_none() => {
                        return Err(Error::format(format!(
                            "sample {i}: CVM mask source without a landmarks file"
                        )));
                    }
                    _ => {}
                }
            }
            if let Some(lm) = &rec.landmarks {
                referenced.push(lm);
            }
            for p in referenced {
                if !dir.join(p).exists() {
                    return Err(Error::io(
                        dir.join(p),
                        std::io::Error::new(std::io::ErrorKind::NotFound, "referenced by manifest"),
                    ));
                }
            }
        }
        Ok(())
    }
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::format(format!("manifest serialization: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Load and validate `manifest.json`; returns the manifest and its base
/// directory (all recorded paths are relative to it).
pub fn load_manifest(path: &Path) -> Result<(Manifest, PathBuf)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("manifest {}: {e}", path.display())))?;
    let dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    manifest.validate(&dir)?;
    Ok((manifest, dir))
}

/// Decode an RGB PNG without normalization. Errors on non-RGB color types.
pub fn decode_rgb(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    match img {
        image::DynamicImage::ImageRgb8(rgb) => {
            let (w, h) = rgb.dimensions();
            Ok((rgb.into_raw(), h as usize, w as usize))
        }
        other => Err(Error::Image {
            path: path.to_path_buf(),
            message: format!("expected 8-bit RGB, got {:?}", other.color()),
        }),
    }
}

/// Load an image as a `3×H×W` tensor: decoded, scaled by 1/255, shifted by
/// −0.5.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let (rgb, h, w) = decode_rgb(path)?;
    Ok(rgb_to_tensor(&rgb, h, w))
}

fn rgb_to_tensor(rgb: &[u8], h: usize, w: usize) -> Tensor<f32> {
    let mut data = vec![0.0f32; 3 * h * w];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                data[ch * h * w + r * w + c] = rgb[(r * w + c) * 3 + ch] as f32 / 255.0 - 0.5;
            }
        }
    }
    Tensor::from_vec(vec![3, h, w], data).expect("sized from dims")
}

/// Materialize the mask of one objective for a sample at the given extent.
pub fn resolve_mask(
    record: &SampleRecord,
    objective: usize,
    h: usize,
    w: usize,
    dir: &Path,
) -> Result<Mask> {
    match &record.masks[objective] {
        MaskSource::Zm => Ok(maskgen::zeros_mask(h, w)),
        MaskSource::Om => Ok(maskgen::ones_mask(h, w)),
        MaskSource::Cvm => {
            let lm_path = record.landmarks.as_ref().ok_or_else(|| {
                Error::format("CVM mask source without a landmarks file".to_string())
            })?;
            let landmarks = maskgen::load_landmarks(&dir.join(lm_path))?;
            maskgen::convex_hull_mask(&landmarks, h, w)
        }
        MaskSource::File { path } => {
            let mask = maskgen::load_mask_png(&dir.join(path))?;
            if mask.height() != h || mask.width() != w {
                return Err(Error::dim(format!(
                    "mask {} is {}x{}, image is {h}x{w}",
                    path.display(),
                    mask.height(),
                    mask.width()
                )));
            }
            Ok(mask)
        }
    }
}

// ── Dataset and batching ───────────────────────────────────────────

/// One decoded sample: raw RGB pixels plus fully resolved masks.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub rgb: Vec<u8>,
    pub h: usize,
    pub w: usize,
    pub label: u8,
    pub masks: Vec<Mask>,
}

/// A manifest plus its directory, optionally with every sample decoded and
/// held in memory (training iterates the data many times).
#[derive(Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub dir: PathBuf,
    cache: Option<Vec<LoadedSample>>,
}

impl Dataset {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let (manifest, dir) = load_manifest(manifest_path)?;
        Ok(Dataset {
            manifest,
            dir,
            cache: None,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn load_sample(&self, idx: usize) -> Result<LoadedSample> {
        if let Some(cache) = &self.cache {
            return Ok(cache[idx].clone());
        }
        self.read_sample(idx)
    }

    fn read_sample(&self, idx: usize) -> Result<LoadedSample> {
        let rec = &self.manifest.samples[idx];
        let (rgb, h, w) = decode_rgb(&self.dir.join(&rec.image))?;
        let masks = (0..self.manifest.k)
            .map(|o| resolve_mask(rec, o, h, w, &self.dir))
            .collect::<Result<Vec<_>>>()?;
        Ok(LoadedSample {
            rgb,
            h,
            w,
            label: rec.label,
            masks,
        })
    }

    /// Decode everything up front.
    pub fn preload(&mut self) -> Result<()> {
        if self.cache.is_none() {
            let samples = (0..self.len())
                .map(|i| self.read_sample(i))
                .collect::<Result<Vec<_>>>()?;
            self.cache = Some(samples);
        }
        Ok(())
    }

    /// Deterministic batch stream. Order is shuffled when `shuffle_seed` is
    /// set, manifest order otherwise; the final partial batch is emitted.
    pub fn batches(
        &self,
        batch_size: usize,
        crop: CropMode,
        shuffle_seed: Option<u64>,
    ) -> BatchIter<'_> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed.unwrap_or(0));
        if shuffle_seed.is_some() {
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
        }
        BatchIter {
            dataset: self,
            order,
            pos: 0,
            batch_size: batch_size.max(1),
            crop,
            rng,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropMode {
    /// Center crop to `size`.
    Center(usize),
    /// Uniform random offset crop to `size`.
    Random(usize),
}

impl CropMode {
    pub fn size(&self) -> usize {
        match *self {
            CropMode::Center(s) | CropMode::Random(s) => s,
        }
    }
}

#[derive(Debug)]
pub struct Batch {
    /// `n×3×s×s`, values in [−0.5, 0.5].
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
    /// Per sample, per objective, cropped like the image.
    pub masks: Vec<Vec<Mask>>,
    /// Manifest indices of the batch samples.
    pub indices: Vec<usize>,
}

pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    crop: CropMode,
    rng: ChaCha8Rng,
}

impl BatchIter<'_> {
    fn build_batch(&mut self, indices: &[usize]) -> Result<Batch> {
        let size = self.crop.size();
        let n = indices.len();
        let mut images = vec![0.0f32; n * 3 * size * size];
        let mut labels = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        for (bi, &idx) in indices.iter().enumerate() {
            let sample = self.dataset.load_sample(idx)?;
            if sample.h < size || sample.w < size {
                return Err(Error::dim(format!(
                    "crop {size} exceeds image {}x{} (sample {idx})",
                    sample.h, sample.w
                )));
            }
            let (top, left) = match self.crop {
                CropMode::Center(_) => ((sample.h - size) / 2, (sample.w - size) / 2),
                CropMode::Random(_) => (
                    self.rng.random_range(0..=sample.h - size),
                    self.rng.random_range(0..=sample.w - size),
                ),
            };
            let plane = size * size;
            let base = bi * 3 * plane;
            for r in 0..size {
                for c in 0..size {
                    let src = ((top + r) * sample.w + left + c) * 3;
                    for ch in 0..3 {
                        images[base + ch * plane + r * size + c] =
                            sample.rgb[src + ch] as f32 / 255.0 - 0.5;
                    }
                }
            }
            labels.push(sample.label);
            masks.push(
                sample
                    .masks
                    .iter()
                    .map(|m| m.crop(top, left, size))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(Batch {
            images: Tensor::from_vec(vec![n, 3, size, size], images)?,
            labels,
            masks,
            indices: indices.to_vec(),
        })
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices: Vec<usize> = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(self.build_batch(&indices))
    }
}
