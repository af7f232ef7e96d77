//! Domain/dataset model: boxes, annotations, samples, domain specs, batches.

pub mod batch;
pub mod coco;
pub mod toybench;

pub use batch::build_batch;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Corner-format box. Invariant: `x_min < x_max`, `y_min < y_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if !b.is_valid() {
            return Err(Error::Validation(format!(
                "degenerate box: ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        Ok(b)
    }

    pub fn is_valid(&self) -> bool {
        self.x_min.is_finite()
            && self.y_min.is_finite()
            && self.x_max.is_finite()
            && self.y_max.is_finite()
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Intersection over union. Degenerate boxes contribute zero overlap;
    /// a zero union yields 0.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let iy = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = ix * iy;
        let union = self.area().max(0.0) + other.area().max(0.0) - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// Clips to `[0, w] x [0, h]`; `None` if nothing valid remains.
    pub fn clip(&self, image_w: f64, image_h: f64) -> Option<BoundingBox> {
        let b = BoundingBox {
            x_min: self.x_min.max(0.0),
            y_min: self.y_min.max(0.0),
            x_max: self.x_max.min(image_w),
            y_max: self.y_max.min(image_h),
        };
        b.is_valid().then_some(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BoundingBox,
    pub class_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub score: f64,
}

impl Detection {
    pub fn drop_score(&self) -> Annotation {
        Annotation {
            bbox: self.bbox,
            class_id: self.class_id,
        }
    }
}

/// Label container enforcing the unsupervised protocol: target-domain train
/// labels are loaded poisoned, and any attempt to read them aborts the run.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Open(Vec<Annotation>),
    Poisoned,
}

impl Labels {
    pub fn empty() -> Self {
        Labels::Open(Vec::new())
    }

    /// Panics on poisoned labels — reaching one in a non-oracle run is a
    /// protocol violation, not a recoverable condition.
    pub fn open(&self) -> &[Annotation] {
        match self {
            Labels::Open(a) => a,
            Labels::Poisoned => panic!(
                "protocol violation: attempted to read poisoned target-domain \
                 train labels; oracle runs must unlock them explicitly"
            ),
        }
    }

    pub fn try_open(&self) -> Option<&[Annotation]> {
        match self {
            Labels::Open(a) => Some(a),
            Labels::Poisoned => None,
        }
    }

    pub fn is_poisoned(&self) -> bool {
        matches!(self, Labels::Poisoned)
    }

    pub fn is_open_nonempty(&self) -> bool {
        matches!(self, Labels::Open(a) if !a.is_empty())
    }
}

/// One image: pixels are channel-first `(3, H, W)` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: u64,
    pub domain_id: usize,
    pub pixels: Array3<f64>,
    pub labels: Labels,
}

impl ImageSample {
    pub fn hw(&self) -> (usize, usize) {
        let (_, h, w) = self.pixels.dim();
        (h, w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainRole {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub name: String,
    pub role: DomainRole,
    pub train_labeled: bool,
}

#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub spec: DomainSpec,
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

/// Checks the cross-domain invariants: exactly one source, source labeled,
/// targets unlabeled, distinct domain ids.
pub fn validate_domain_set(specs: &[DomainSpec]) -> Result<()> {
    let sources: Vec<_> = specs
        .iter()
        .filter(|s| s.role == DomainRole::Source)
        .collect();
    if sources.len() != 1 {
        return Err(Error::Config(format!(
            "expected exactly one source domain, found {}",
            sources.len()
        )));
    }
    if !sources[0].train_labeled {
        return Err(Error::Config("source domain must be train-labeled".into()));
    }
    for s in specs {
        if s.role == DomainRole::Target && s.train_labeled {
            return Err(Error::Config(format!(
                "target domain '{}' must not be train-labeled",
                s.name
            )));
        }
    }
    let mut ids: Vec<usize> = specs.iter().map(|s| s.domain_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != specs.len() {
        return Err(Error::Config("duplicate domain ids".into()));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct MultiDomainBatch {
    pub per_domain: std::collections::BTreeMap<usize, Vec<ImageSample>>,
    pub composition: std::collections::BTreeMap<usize, usize>,
}

impl MultiDomainBatch {
    pub fn satisfies_composition(&self) -> bool {
        self.composition.len() == self.per_domain.len()
            && self
                .composition
                .iter()
                .all(|(d, n)| self.per_domain.get(d).map(|v| v.len()) == Some(*n))
    }

    pub fn total_len(&self) -> usize {
        self.per_domain.values().map(|v| v.len()).sum()
    }

    /// Flat view in ascending domain-id order; stable across runs.
    pub fn iter_flat(&self) -> impl Iterator<Item = &ImageSample> {
        self.per_domain.values().flatten()
    }
}
