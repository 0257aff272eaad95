//! Seeded synthetic manipulation benchmark.
//!
//! Each sample is a smoothed-noise background with a brighter elliptical
//! "face" region. Fake samples re-render a real sample's image with a local
//! artifact — channel quantization plus a ±amplitude 2×2-block checkerboard —
//! applied either inside a random convex polygon within the face
//! (MANIPULATED) or to every pixel (FULLY-GENERATED). The artifact is small
//! enough to leave global statistics alone, so classification has to rely
//! on local texture.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskgen::{self, LandmarkSet, Mask};

use super::{save_manifest, Manifest, MaskSource, SampleRecord, MANIFEST_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    /// Real images generated; fakes match this count (half manipulated,
    /// half fully generated).
    pub count_per_class: usize,
    /// Square image extent in pixels.
    pub size: usize,
    pub seed: u64,
    /// Checkerboard perturbation amplitude in [0,1] pixel units.
    pub amplitude: f32,
    /// Quantization levels applied inside manipulated regions.
    pub levels: u32,
    /// 3×3 box-blur passes over the noise background.
    pub smoothing_passes: u32,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            count_per_class: 100,
            size: 128,
            seed: 0,
            amplitude: 0.02,
            levels: 32,
            smoothing_passes: 3,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.count_per_class == 0 {
            return Err(Error::config("count_per_class must be positive"));
        }
        if self.size < 33 {
            return Err(Error::config(format!(
                "image size {} below the 33-pixel receptive field",
                self.size
            )));
        }
        if !(self.amplitude > 0.0 && self.amplitude < 0.5) {
            return Err(Error::config(format!(
                "amplitude {} outside (0, 0.5)",
                self.amplitude
            )));
        }
        if self.levels < 2 {
            return Err(Error::config("levels must be at least 2"));
        }
        Ok(())
    }
}

/// How the manipulated-pixels objective labels its masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FakeMaskPolicy {
    /// Ground-truth region masks written by the generator.
    FromFile,
    /// Convex-hull-of-landmarks approximation.
    Cvm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveSpec {
    /// Predict manipulated pixels (ZM for real, OM for fully generated).
    Fake(FakeMaskPolicy),
    /// Predict the face region (CVM for every sample).
    Face,
}

impl ObjectiveSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveSpec::Fake(_) => "fake",
            ObjectiveSpec::Face => "face",
        }
    }
}

/// Parse a comma-separated objective list: `fake`, `fake-cvm`, `face`, or
/// `none` for a classification-only (k = 0) manifest.
pub fn parse_objectives(spec: &str) -> Result<Vec<ObjectiveSpec>> {
    let spec = spec.trim();
    if spec.is_empty() || spec == "none" {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for token in spec.split(',') {
        let obj = match token.trim() {
            "fake" => ObjectiveSpec::Fake(FakeMaskPolicy::FromFile),
            "fake-cvm" => ObjectiveSpec::Fake(FakeMaskPolicy::Cvm),
            "face" => ObjectiveSpec::Face,
            other => {
                return Err(Error::config(format!(
                    "unknown objective `{other}` (expected fake, fake-cvm, face, none)"
                )))
            }
        };
        if out.iter().any(|o: &ObjectiveSpec| o.name() == obj.name()) {
            return Err(Error::config(format!(
                "duplicate objective `{}`",
                obj.name()
            )));
        }
        out.push(obj);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthSummary {
    pub out_dir: PathBuf,
    pub total_images: usize,
    pub real: usize,
    pub manipulated: usize,
    pub fully_generated: usize,
    pub k: usize,
    pub objectives: Vec<String>,
    /// Mean |pixel delta| between each manipulated image and its paired
    /// real render, inside the artifact region (8-bit units / 255).
    pub mean_abs_delta_inside: f64,
    /// Same measure outside the region; zero by construction.
    pub mean_abs_delta_outside: f64,
    /// Mean artifact-region area as a fraction of the image.
    pub mean_region_fraction: f64,
}

struct BaseRender {
    /// Planar 3×H×W float image in [0, 1].
    pixels: Vec<f32>,
    landmarks: LandmarkSet,
    center: (f64, f64),
    axes: (f64, f64),
}

fn box_blur(plane: &mut [f32], h: usize, w: usize, passes: u32) {
    let mut tmp = vec![0.0f32; h * w];
    for _ in 0..passes {
        for r in 0..h {
            for c in 0..w {
                let mut sum = 0.0;
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let rr = (r as i64 + dr).clamp(0, h as i64 - 1) as usize;
                        let cc = (c as i64 + dc).clamp(0, w as i64 - 1) as usize;
                        sum += plane[rr * w + cc];
                    }
                }
                tmp[r * w + c] = sum / 9.0;
            }
        }
        plane.copy_from_slice(&tmp);
    }
}

fn render_base(rng: &mut ChaCha8Rng, params: &SynthParams) -> BaseRender {
    let s = params.size;
    let sf = s as f64;
    let mut pixels = vec![0.0f32; 3 * s * s];
    for ch in 0..3 {
        let plane = &mut pixels[ch * s * s..(ch + 1) * s * s];
        for v in plane.iter_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        box_blur(plane, s, s, params.smoothing_passes);
        for v in plane.iter_mut() {
            *v = 0.25 + 0.5 * *v;
        }
    }

    let cx = sf * rng.random_range(0.42..0.58);
    let cy = sf * rng.random_range(0.42..0.58);
    let ax = sf * rng.random_range(0.22..0.32);
    let ay = sf * rng.random_range(0.22..0.32);
    let boost = rng.random_range(0.10..0.18) as f32;
    for r in 0..s {
        for c in 0..s {
            let dx = (c as f64 + 0.5 - cx) / ax;
            let dy = (r as f64 + 0.5 - cy) / ay;
            let d2 = dx * dx + dy * dy;
            if d2 <= 1.0 {
                let falloff = (1.0 - 0.5 * d2) as f32;
                for ch in 0..3 {
                    let v = &mut pixels[ch * s * s + r * s + c];
                    *v = (*v + boost * falloff).min(1.0);
                }
            }
        }
    }

    let points: Vec<[f64; 2]> = (0..14)
        .map(|j| {
            let theta = TAU * j as f64 / 14.0;
            let radial = rng.random_range(0.92..1.0);
            [
                cx + ax * radial * theta.cos(),
                cy + ay * radial * theta.sin(),
            ]
        })
        .collect();
    let landmarks = LandmarkSet::new(points).expect("14 points");
    BaseRender {
        pixels,
        landmarks,
        center: (cx, cy),
        axes: (ax, ay),
    }
}

/// Quantize to `levels` then add the signed 2×2-block checkerboard.
fn artifact_pixel(v: f32, r: usize, c: usize, params: &SynthParams) -> f32 {
    let l = (params.levels - 1) as f32;
    let q = (v * l).round() / l;
    let sign = if ((r / 2) + (c / 2)).is_multiple_of(2) {
        1.0
    } else {
        -1.0
    };
    (q + params.amplitude * sign).clamp(0.0, 1.0)
}

fn apply_artifact(pixels: &mut [f32], region: &Mask, s: usize, params: &SynthParams) {
    for r in 0..s {
        for c in 0..s {
            if region.get(r, c) == 1 {
                for ch in 0..3 {
                    let v = &mut pixels[ch * s * s + r * s + c];
                    *v = artifact_pixel(*v, r, c, params);
                }
            }
        }
    }
}

/// Random convex polygon inside the face ellipse. Points are drawn near the
/// ellipse boundary so the region covers a face-scale area, the way a
/// swapped face does.
fn sample_region(rng: &mut ChaCha8Rng, base: &BaseRender, s: usize) -> Result<Mask> {
    let (cx, cy) = base.center;
    let (ax, ay) = base.axes;
    let min_area = (s * s / 25).max(16);
    for _ in 0..64 {
        let points: Vec<[f64; 2]> = (0..10)
            .map(|_| {
                let phi = rng.random_range(0.0..TAU);
                let rho = rng.random_range(0.55f64..0.95);
                [cx + ax * rho * phi.cos(), cy + ay * rho * phi.sin()]
            })
            .collect();
        let Ok(hull) = maskgen::convex_hull(&points) else {
            continue;
        };
        let mask = maskgen::rasterize_hull(&hull, s, s);
        if mask.count_ones() >= min_area {
            return Ok(mask);
        }
    }
    Err(Error::Contract(
        "could not sample a non-degenerate manipulation region".into(),
    ))
}

fn to_png_rgb(pixels: &[f32], s: usize) -> Vec<u8> {
    let plane = s * s;
    let mut rgb = vec![0u8; plane * 3];
    for r in 0..s {
        for c in 0..s {
            for ch in 0..3 {
                let v = (pixels[ch * plane + r * s + c] * 255.0)
                    .round()
                    .clamp(0.0, 255.0);
                rgb[(r * s + c) * 3 + ch] = v as u8;
            }
        }
    }
    rgb
}

fn save_rgb(rgb: &[u8], s: usize, path: &Path) -> Result<()> {
    let img = image::RgbImage::from_raw(s as u32, s as u32, rgb.to_vec())
        .expect("buffer sized from dims");
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn mask_sources(
    objectives: &[ObjectiveSpec],
    kind: Kind,
    mask_rel: Option<&Path>,
) -> Vec<MaskSource> {
    objectives
        .iter()
        .map(|obj| match obj {
            ObjectiveSpec::Face => MaskSource::Cvm,
            ObjectiveSpec::Fake(policy) => match kind {
                Kind::Real => MaskSource::Zm,
                Kind::FullyGenerated => MaskSource::Om,
                Kind::Manipulated => match policy {
                    FakeMaskPolicy::Cvm => MaskSource::Cvm,
                    FakeMaskPolicy::FromFile => MaskSource::File {
                        path: mask_rel
                            .expect("manipulated sample has a mask file")
                            .to_path_buf(),
                    },
                },
            },
        })
        .collect()
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Real,
    Manipulated,
    FullyGenerated,
}

/// Generate the dataset tree (`images/`, `masks/`, `landmarks/`,
/// `manifest.json`) under `out_dir`. Byte-identical for identical
/// parameters. Every fake image is the re-render of a paired real image, so
/// the artifact is the only difference between the classes.
pub fn synth_dataset(
    params: &SynthParams,
    objectives: &[ObjectiveSpec],
    out_dir: &Path,
) -> Result<SynthSummary> {
    params.validate()?;
    let s = params.size;
    for sub in ["images", "masks", "landmarks"] {
        std::fs::create_dir_all(out_dir.join(sub)).map_err(|e| Error::io(out_dir.join(sub), e))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let count = params.count_per_class;
    let manip_count = count.div_ceil(2);

    let mut samples = Vec::new();
    let mut delta_inside_sum = 0.0f64;
    let mut delta_inside_n = 0u64;
    let mut delta_outside_sum = 0.0f64;
    let mut delta_outside_n = 0u64;
    let mut region_fraction_sum = 0.0f64;

    for i in 0..count {
        let base = render_base(&mut rng, params);
        let real_rgb = to_png_rgb(&base.pixels, s);

        let stem_real = format!("real_{i:05}");
        let image_rel = PathBuf::from(format!("images/{stem_real}.png"));
        let lm_rel = PathBuf::from(format!("landmarks/{stem_real}.json"));
        save_rgb(&real_rgb, s, &out_dir.join(&image_rel))?;
        maskgen::save_landmarks(&base.landmarks, &out_dir.join(&lm_rel))?;
        samples.push(SampleRecord {
            image: image_rel,
            label: 0,
            masks: mask_sources(objectives, Kind::Real, None),
            landmarks: Some(lm_rel),
        });

        let kind = if i < manip_count {
            Kind::Manipulated
        } else {
            Kind::FullyGenerated
        };
        let mut fake_pixels = base.pixels.clone();
        let (stem_fake, region) = match kind {
            Kind::Manipulated => {
                let region = sample_region(&mut rng, &base, s)?;
                apply_artifact(&mut fake_pixels, &region, s, params);
                (format!("manip_{i:05}"), Some(region))
            }
            Kind::FullyGenerated => {
                let all = maskgen::ones_mask(s, s);
                apply_artifact(&mut fake_pixels, &all, s, params);
                (format!("fullgen_{i:05}"), None)
            }
            Kind::Real => unreachable!(),
        };
        let fake_rgb = to_png_rgb(&fake_pixels, s);
        let image_rel = PathBuf::from(format!("images/{stem_fake}.png"));
        let lm_rel = PathBuf::from(format!("landmarks/{stem_fake}.json"));
        save_rgb(&fake_rgb, s, &out_dir.join(&image_rel))?;
        maskgen::save_landmarks(&base.landmarks, &out_dir.join(&lm_rel))?;

        let mask_rel = region.as_ref().map(|region| {
            let rel = PathBuf::from(format!("masks/{stem_fake}.png"));
            (region, rel)
        });
        if let Some((region, rel)) = &mask_rel {
            maskgen::save_mask_png(region, &out_dir.join(rel))?;
            // Report the artifact magnitude from the emitted pair.
            region_fraction_sum += region.count_ones() as f64 / (s * s) as f64;
            for r in 0..s {
                for c in 0..s {
                    let mut delta = 0.0f64;
                    for ch in 0..3 {
                        let a = fake_rgb[(r * s + c) * 3 + ch] as f64;
                        let b = real_rgb[(r * s + c) * 3 + ch] as f64;
                        delta += (a - b).abs() / 255.0;
                    }
                    delta /= 3.0;
                    if region.get(r, c) == 1 {
                        delta_inside_sum += delta;
                        delta_inside_n += 1;
                    } else {
                        delta_outside_sum += delta;
                        delta_outside_n += 1;
                    }
                }
            }
        }
        samples.push(SampleRecord {
            image: image_rel,
            label: 1,
            masks: mask_sources(
                objectives,
                kind,
                mask_rel.as_ref().map(|(_, rel)| rel.as_path()),
            ),
            landmarks: Some(lm_rel),
        });
    }

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        k: objectives.len(),
        objectives: objectives.iter().map(|o| o.name().to_string()).collect(),
        crop_size: s,
        samples,
    };
    save_manifest(&manifest, &out_dir.join("manifest.json"))?;

    Ok(SynthSummary {
        out_dir: out_dir.to_path_buf(),
        total_images: 2 * count,
        real: count,
        manipulated: manip_count,
        fully_generated: count - manip_count,
        k: objectives.len(),
        objectives: manifest.objectives.clone(),
        mean_abs_delta_inside: if delta_inside_n > 0 {
            delta_inside_sum / delta_inside_n as f64
        } else {
            0.0
        },
        mean_abs_delta_outside: if delta_outside_n > 0 {
            delta_outside_sum / delta_outside_n as f64
        } else {
            0.0
        },
        mean_region_fraction: if manip_count > 0 {
            region_fraction_sum / manip_count as f64
        } else {
            0.0
        },
    })
}
