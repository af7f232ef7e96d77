//! COCO-style annotation documents and PNG image IO.
//!
//! On disk boxes are `[x, y, w, h]`; in memory they are corner-format. The
//! writer nudges stored extents by at most a few ulps so that
//! `x + w == x_max` holds exactly on reload, making round-trips bit-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{Annotation, BoundingBox, DomainDataset, DomainRole, DomainSpec, ImageSample, Labels};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoDoc {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnn>,
    pub categories: Vec<CocoCat>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoAnn {
    pub id: u64,
    pub image_id: u64,
    pub category_id: usize,
    pub bbox: [f64; 4],
    /// Exact corner coordinates `[x_max, y_max]`, written only for the rare
    /// box where no 64-bit extent satisfies `x + w == x_max` (rounding ties).
    /// Readers of plain COCO documents ignore it; our reader prefers it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox_corner: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoCat {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_stem(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// How train-split labels of target domains are handled on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelPolicy {
    /// Unsupervised protocol: target train labels are poisoned.
    #[default]
    Protocol,
    /// Oracle runs only: target train labels readable.
    UnlockTargets,
}

/// Finds an extent `w` with `lo + w == hi` exactly via ulp nudges. Fails for
/// boxes whose candidate sums all land on round-to-even ties, in which case
/// the writer falls back to the `bbox_corner` hint.
fn exact_extent(lo: f64, hi: f64) -> Option<f64> {
    let mut w = hi - lo;
    if lo + w == hi {
        return Some(w);
    }
    for _ in 0..8 {
        w = if lo + w < hi { w.next_up() } else { w.next_down() };
        if lo + w == hi {
            return Some(w);
        }
    }
    None
}

pub fn read_doc(path: &Path) -> Result<CocoDoc> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Load(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_doc(path: &Path, doc: &CocoDoc) -> Result<()> {
    let text = serde_json::to_string_pretty(doc)?;
    fs::write(path, text)?;
    Ok(())
}

/// Builds a document from labeled samples. `file_name` is produced by the
/// caller-provided naming function.
pub fn doc_from_samples(
    samples: &[ImageSample],
    class_names: &[String],
    file_name: impl Fn(&ImageSample) -> String,
) -> Result<CocoDoc> {
    let mut images = Vec::with_capacity(samples.len());
    let mut annotations = Vec::new();
    let mut next_ann_id = 1u64;
    for s in samples {
        let (h, w) = s.hw();
        images.push(CocoImage {
            id: s.id,
            width: w as u32,
            height: h as u32,
            file_name: file_name(s),
        });
        let labels = s.labels.try_open().ok_or_else(|| {
            Error::Validation(format!(
                "cannot serialize poisoned labels (image {}, domain {})",
                s.id, s.domain_id
            ))
        })?;
        for a in labels {
            if a.class_id >= class_names.len() {
                return Err(Error::Validation(format!(
                    "class id {} out of range for {} classes",
                    a.class_id,
                    class_names.len()
                )));
            }
            let bw = exact_extent(a.bbox.x_min, a.bbox.x_max);
            let bh = exact_extent(a.bbox.y_min, a.bbox.y_max);
            let bbox_corner = (bw.is_none() || bh.is_none())
                .then_some([a.bbox.x_max, a.bbox.y_max]);
            annotations.push(CocoAnn {
                id: next_ann_id,
                image_id: s.id,
                category_id: a.class_id,
                bbox: [
                    a.bbox.x_min,
                    a.bbox.y_min,
                    bw.unwrap_or(a.bbox.width()),
                    bh.unwrap_or(a.bbox.height()),
                ],
                bbox_corner,
            });
            next_ann_id += 1;
        }
    }
    let categories = class_names
        .iter()
        .enumerate()
        .map(|(id, name)| CocoCat {
            id,
            name: name.clone(),
        })
        .collect();
    Ok(CocoDoc {
        images,
        annotations,
        categories,
    })
}

fn doc_to_samples(doc: &CocoDoc, image_root: &Path, domain_id: usize) -> Result<Vec<ImageSample>> {
    let num_classes = doc.categories.len();
    let mut by_image: BTreeMap<u64, Vec<Annotation>> = BTreeMap::new();
    for ann in &doc.annotations {
        let [x, y, w, h] = ann.bbox;
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::Validation(format!(
                "degenerate bbox (w={w}, h={h}) in annotation id {}",
                ann.id
            )));
        }
        if ann.category_id >= num_classes {
            return Err(Error::Validation(format!(
                "annotation id {} has category {} but document declares {} categories",
                ann.id, ann.category_id, num_classes
            )));
        }
        let (x_max, y_max) = match ann.bbox_corner {
            Some([cx, cy]) => (cx, cy),
            None => (x + w, y + h),
        };
        let bbox = BoundingBox::new(x, y, x_max, y_max).map_err(|_| {
            Error::Validation(format!("annotation id {} converts to a degenerate box", ann.id))
        })?;
        by_image.entry(ann.image_id).or_default().push(Annotation {
            bbox,
            class_id: ann.category_id,
        });
    }
    let mut samples = Vec::with_capacity(doc.images.len());
    for im in &doc.images {
        let pixels = read_png(&image_root.join(&im.file_name))?;
        let (_, h, w) = pixels.dim();
        if (h as u32, w as u32) != (im.height, im.width) {
            return Err(Error::Load(format!(
                "image {} is {}x{} on disk but {}x{} in the document",
                im.file_name, w, h, im.width, im.height
            )));
        }
        samples.push(ImageSample {
            id: im.id,
            domain_id,
            pixels,
            labels: Labels::Open(by_image.remove(&im.id).unwrap_or_default()),
        });
    }
    if let Some((orphan, _)) = by_image.iter().next() {
        return Err(Error::Validation(format!(
            "annotations reference missing image id {orphan}"
        )));
    }
    Ok(samples)
}

/// Loads one COCO-style document as a train split under the unsupervised
/// protocol (target-domain train labels poisoned). Images are resolved
/// relative to the document's directory.
pub fn load_annotations(path: &Path, domain: &DomainSpec) -> Result<DomainDataset> {
    let root = path.parent().unwrap_or(Path::new("."));
    let doc = read_doc(path)?;
    let mut train = doc_to_samples(&doc, root, domain.domain_id)?;
    apply_policy(&mut train, domain, Split::Train, LabelPolicy::Protocol);
    Ok(DomainDataset {
        spec: domain.clone(),
        train,
        test: Vec::new(),
    })
}

fn apply_policy(samples: &mut [ImageSample], spec: &DomainSpec, split: Split, policy: LabelPolicy) {
    let poison = split == Split::Train
        && spec.role == DomainRole::Target
        && policy == LabelPolicy::Protocol;
    if poison {
        for s in samples.iter_mut() {
            s.labels = Labels::Poisoned;
        }
    }
}

/// Writes one split of a domain: PNGs under `images/<split>/` plus
/// `<split>.json`. Requires open labels (generators hold full labels; the
/// protocol is applied at load time).
pub fn write_split(
    domain_dir: &Path,
    split: Split,
    samples: &[ImageSample],
    class_names: &[String],
) -> Result<()> {
    let img_dir = domain_dir.join("images").join(split.file_stem());
    fs::create_dir_all(&img_dir)?;
    for s in samples {
        write_png(&img_dir.join(format!("{:06}.png", s.id)), &s.pixels)?;
    }
    let rel = |s: &ImageSample| format!("images/{}/{:06}.png", split.file_stem(), s.id);
    let doc = doc_from_samples(samples, class_names, rel)?;
    write_doc(&domain_dir.join(format!("{}.json", split.file_stem())), &doc)
}

/// Loads one split of a domain directory written by `write_split`.
pub fn load_split(
    domain_dir: &Path,
    split: Split,
    spec: &DomainSpec,
    policy: LabelPolicy,
) -> Result<Vec<ImageSample>> {
    let doc = read_doc(&domain_dir.join(format!("{}.json", split.file_stem())))?;
    let mut samples = doc_to_samples(&doc, domain_dir, spec.domain_id)?;
    apply_policy(&mut samples, spec, split, policy);
    Ok(samples)
}

pub fn load_domain(domain_dir: &Path, spec: &DomainSpec, policy: LabelPolicy) -> Result<DomainDataset> {
    Ok(DomainDataset {
        spec: spec.clone(),
        train: load_split(domain_dir, Split::Train, spec, policy)?,
        test: load_split(domain_dir, Split::Test, spec, policy)?,
    })
}

pub fn read_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Load(format!("cannot read {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

pub fn write_png(path: &Path, pixels: &Array3<f64>) -> Result<()> {
    let (c, h, w) = pixels.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let mut buf = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = (pixels[[ch, y, x]] * 255.0).round().clamp(0.0, 255.0);
                buf[(y * w + x) * 3 + ch] = v as u8;
            }
        }
    }
    let img: image::RgbImage =
        image::ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer size");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// Bench directory layout helper: `<root>/<domain name>`.
pub fn domain_dir(root: &Path, spec: &DomainSpec) -> PathBuf {
    root.join(&spec.name)
}
