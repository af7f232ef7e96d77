//! Stage 1: pixel-level source-to-target translation.
//!
//! The reference translator matches per-channel color statistics of the
//! source train split to the (merged) target train pool with an affine map.
//! It is a stand-in for heavier image-to-image models; translations produced
//! by such a model offline can be imported instead via
//! [`load_external_translation`]. The whole stage is optional — the identity
//! translator leaves the pipeline untouched.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::data::{DomainDataset, ImageSample};
use crate::error::{Error, Result};
use crate::par::{map_ordered, ExecMode};

/// Floor applied to fitted standard deviations so the affine map stays finite
/// on constant channels.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-channel pixel moments of a train split (population std, floored).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

fn fit_pixels<'a>(
    samples: impl Iterator<Item = &'a ImageSample>,
    what: &str,
) -> Result<ColorStats> {
    let mut sum = [0.0f64; 3];
    let mut sumsq = [0.0f64; 3];
    let mut n = 0u64;
    for s in samples {
        let (c, h, w) = s.pixels.dim();
        assert_eq!(c, 3, "images are (3, H, W)");
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = s.pixels[[ch, y, x]];
                    sum[ch] += v;
                    sumsq[ch] += v * v;
                }
            }
        }
        n += (h * w) as u64;
    }
    if n == 0 {
        return Err(Error::Validation(format!(
            "cannot fit color stats: {what} has no pixels"
        )));
    }
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for ch in 0..3 {
        mean[ch] = sum[ch] / n as f64;
        let var = (sumsq[ch] / n as f64 - mean[ch] * mean[ch]).max(0.0);
        std[ch] = var.sqrt().max(STD_FLOOR);
    }
    Ok(ColorStats { mean, std })
}

/// Fits per-channel moments over every train pixel of the domain.
pub fn fit_color_stats(dataset: &DomainDataset) -> Result<ColorStats> {
    fit_pixels(dataset.train.iter(), &format!("domain '{}'", dataset.spec.name))
}

fn affine_map(image: &Array3<f64>, src: &ColorStats, tgt: &ColorStats) -> Array3<f64> {
    let (c, h, w) = image.dim();
    assert_eq!(c, 3, "images are (3, H, W)");
    let mut out = Array3::zeros((3, h, w));
    for ch in 0..3 {
        let scale = tgt.std[ch] / src.std[ch];
        for y in 0..h {
            for x in 0..w {
                out[[ch, y, x]] = (image[[ch, y, x]] - src.mean[ch]) * scale + tgt.mean[ch];
            }
        }
    }
    out
}

/// Per-channel affine restyling `x ↦ (x − μ_s)/σ_s · σ_t + μ_t`, clipped to
/// `[0, 1]`. Matched stats short-circuit to the identity so that case is
/// exact rather than subject to rounding.
pub fn translate(image: &Array3<f64>, src: &ColorStats, tgt: &ColorStats) -> Array3<f64> {
    if src == tgt {
        return image.mapv(|v| v.clamp(0.0, 1.0));
    }
    affine_map(image, src, tgt).mapv_into(|v| v.clamp(0.0, 1.0))
}

/// A fitted (or trivial) source-to-target image map. Geometry-preserving by
/// construction: annotations of a translated image carry over unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Translator {
    /// No-op; keeps the stage optional.
    Identity,
    /// The reference statistics-matching translator.
    ColorMatch { source: ColorStats, target: ColorStats },
}

impl Translator {
    /// Fits the reference translator. Target moments pool the train splits of
    /// all given target domains (the merged-target setting); pass a single
    /// target for per-target translation.
    pub fn fit_color_match(source: &DomainDataset, targets: &[&DomainDataset]) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Validation(
                "cannot fit a translator without target domains".into(),
            ));
        }
        let src = fit_color_stats(source)?;
        let tgt = fit_pixels(
            targets.iter().flat_map(|d| d.train.iter()),
            "merged target pool",
        )?;
        Ok(Translator::ColorMatch { source: src, target: tgt })
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Translator::Identity)
    }

    pub fn apply(&self, image: &Array3<f64>) -> Array3<f64> {
        match self {
            Translator::Identity => image.clone(),
            Translator::ColorMatch { source, target } => translate(image, source, target),
        }
    }
}

/// Builds S′: same ids, labels, and spec as `dataset`, translated pixels.
/// Both splits are mapped; stage 2 consumes only the train split.
pub fn translate_dataset(
    dataset: &DomainDataset,
    translator: &Translator,
    mode: ExecMode,
) -> DomainDataset {
    let map_split = |split: &[ImageSample]| -> Vec<ImageSample> {
        map_ordered(mode, split.iter().collect(), |s| ImageSample {
            id: s.id,
            domain_id: s.domain_id,
            pixels: translator.apply(&s.pixels),
            labels: s.labels.clone(),
        })
    };
    DomainDataset {
        spec: dataset.spec.clone(),
        train: map_split(&dataset.train),
        test: map_split(&dataset.test),
    }
}

/// Assembles S′ from externally translated train images: `dir` must hold one
/// `NNNNNN.png` per source train image id, same dimensions. Annotations come
/// from the source; the test split is carried over untranslated.
pub fn load_external_translation(dir: &Path, source: &DomainDataset) -> Result<DomainDataset> {
    let mut train = Vec::with_capacity(source.train.len());
    let mut missing = Vec::new();
    for s in &source.train {
        let path = dir.join(format!("{:06}.png", s.id));
        if !path.is_file() {
            missing.push(s.id);
            continue;
        }
        let pixels = crate::data::coco::read_png(&path)?;
        if pixels.dim() != s.pixels.dim() {
            return Err(Error::Load(format!(
                "external translation for image {} has shape {:?}, expected {:?}",
                s.id,
                pixels.dim(),
                s.pixels.dim()
            )));
        }
        train.push(ImageSample {
            id: s.id,
            domain_id: s.domain_id,
            pixels,
            labels: s.labels.clone(),
        });
    }
    if !missing.is_empty() {
        return Err(Error::Load(format!(
            "external translation at {} is incomplete: missing image ids {:?}",
            dir.display(),
            missing
        )));
    }
    Ok(DomainDataset {
        spec: source.spec.clone(),
        train,
        test: source.test.clone(),
    })
}

/// Persists a translator as a small JSON manifest.
pub fn save_translator(path: &Path, translator: &Translator) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(translator)?)?;
    Ok(())
}

pub fn load_translator(path: &Path) -> Result<Translator> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Load(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}
