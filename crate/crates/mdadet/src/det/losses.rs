//! Detection losses: sigmoid focal loss over per-anchor class logits and
//! smooth-L1 over box deltas, both normalized by the foreground anchor count
//! (floored at one). Gradients are hand-derived in stable log-space forms.

use ndarray::Array2;

use crate::data::Annotation;
use crate::error::{Error, Result};

use super::anchors::AnchorSet;
use super::matching::{assign_anchors, encode_box, Assign};
use super::model::DetectorOutputs;

pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBundle {
    pub l_class: f64,
    pub l_box: f64,
}

impl LossBundle {
    pub const ZERO: LossBundle = LossBundle {
        l_class: 0.0,
        l_box: 0.0,
    };

    pub fn total(&self) -> f64 {
        self.l_class + self.l_box
    }
}

impl std::ops::AddAssign for LossBundle {
    fn add_assign(&mut self, rhs: LossBundle) {
        self.l_class += rhs.l_class;
        self.l_box += rhs.l_box;
    }
}

/// Gradients with respect to the head outputs, aligned level-by-level with
/// the `DetectorOutputs` they were computed from.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub levels: Vec<(Array2<f64>, Array2<f64>)>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Focal term for one logit: returns (loss, dloss/dlogit).
///
/// Positive target:  L = -a (1-p)^g ln p,   dL/dx = a (1-p)^g (g p ln p - (1-p))
/// Negative target:  L = -(1-a) p^g ln(1-p), dL/dx = (1-a) p^g (p - g (1-p) ln(1-p))
/// with p = sigmoid(x); the powers go through exp(g * log-prob) so extreme
/// logits underflow to zero instead of producing inf * 0.
pub fn focal_term(logit: f64, positive: bool) -> (f64, f64) {
    let log_p = -softplus(-logit);
    let log_1p = -softplus(logit);
    let p = sigmoid(logit);
    if positive {
        let w = (FOCAL_GAMMA * log_1p).exp();
        let loss = -FOCAL_ALPHA * w * log_p;
        let grad = FOCAL_ALPHA * w * (FOCAL_GAMMA * p * log_p - (1.0 - p));
        (loss, grad)
    } else {
        let w = (FOCAL_GAMMA * log_p).exp();
        let loss = -(1.0 - FOCAL_ALPHA) * w * log_1p;
        let grad = (1.0 - FOCAL_ALPHA) * w * (p - FOCAL_GAMMA * (1.0 - p) * log_1p);
        (loss, grad)
    }
}

/// Smooth-L1 on one residual: quadratic inside `beta`, linear outside.
pub fn smooth_l1_term(d: f64, beta: f64) -> (f64, f64) {
    let ad = d.abs();
    if ad < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (ad - 0.5 * beta, d.signum())
    }
}

/// Loss and output-gradients for one image's head outputs against its
/// annotations. Anchors are assigned per level in order; ignored anchors
/// contribute nothing. Both sums divide by max(1, number of foreground
/// anchors). Non-finite results trip a numeric error naming the level.
pub fn detection_loss(
    outputs: &DetectorOutputs,
    anchors: &AnchorSet,
    gts: &[Annotation],
    num_classes: usize,
) -> Result<(LossBundle, OutputGrads)> {
    if outputs.levels.len() != anchors.levels.len() {
        return Err(Error::Shape(format!(
            "outputs cover {} levels but anchor set has {}",
            outputs.levels.len(),
            anchors.levels.len()
        )));
    }
    for gt in gts {
        if !gt.bbox.is_valid() {
            return Err(Error::Validation(format!(
                "ground-truth box {:?} is degenerate",
                gt.bbox
            )));
        }
        if gt.class_id >= num_classes {
            return Err(Error::Validation(format!(
                "ground-truth class {} out of range (num_classes = {num_classes})",
                gt.class_id
            )));
        }
    }

    // First pass: assignments and the global foreground count.
    let mut assigns = Vec::with_capacity(anchors.levels.len());
    let mut n_fg = 0usize;
    for (rows, la) in outputs.levels.iter().zip(&anchors.levels) {
        if rows.level != la.level {
            return Err(Error::Shape(format!(
                "output level {} does not match anchor level {}",
                rows.level, la.level
            )));
        }
        let n = la.boxes.len();
        if rows.cls.nrows() != n || rows.cls.ncols() != num_classes {
            return Err(Error::Shape(format!(
                "{}: cls outputs {}x{}, expected {}x{}",
                la.level,
                rows.cls.nrows(),
                rows.cls.ncols(),
                n,
                num_classes
            )));
        }
        if rows.reg.nrows() != n || rows.reg.ncols() != 4 {
            return Err(Error::Shape(format!(
                "{}: reg outputs {}x{}, expected {}x4",
                la.level,
                rows.reg.nrows(),
                rows.reg.ncols(),
                n
            )));
        }
        let a = assign_anchors(&la.boxes, gts);
        n_fg += a.iter().filter(|x| matches!(x, Assign::Fg { .. })).count();
        assigns.push(a);
    }
    let norm = (n_fg.max(1)) as f64;

    let mut l_class = 0.0;
    let mut l_box = 0.0;
    let mut grads = Vec::with_capacity(outputs.levels.len());
    for ((rows, la), assign) in outputs.levels.iter().zip(&anchors.levels).zip(&assigns) {
        let mut cls_sum = 0.0;
        let mut box_sum = 0.0;
        let mut dcls = Array2::<f64>::zeros(rows.cls.raw_dim());
        let mut dreg = Array2::<f64>::zeros(rows.reg.raw_dim());
        for (i, asn) in assign.iter().enumerate() {
            match *asn {
                Assign::Ignore => {}
                Assign::Bg => {
                    for c in 0..num_classes {
                        let (l, g) = focal_term(rows.cls[[i, c]], false);
                        cls_sum += l;
                        dcls[[i, c]] = g / norm;
                    }
                }
                Assign::Fg { gt, .. } => {
                    for c in 0..num_classes {
                        let (l, g) = focal_term(rows.cls[[i, c]], gts[gt].class_id == c);
                        cls_sum += l;
                        dcls[[i, c]] = g / norm;
                    }
                    let target = encode_box(&la.boxes[i], &gts[gt].bbox);
                    for k in 0..4 {
                        let (l, g) = smooth_l1_term(rows.reg[[i, k]] - target[k], SMOOTH_L1_BETA);
                        box_sum += l;
                        dreg[[i, k]] = g / norm;
                    }
                }
            }
        }
        if !cls_sum.is_finite() || !box_sum.is_finite() {
            return Err(Error::numeric(
                la.level.name(),
                "non-finite detection loss contribution",
            ));
        }
        l_class += cls_sum;
        l_box += box_sum;
        grads.push((dcls, dreg));
    }

    Ok((
        LossBundle {
            l_class: l_class / norm,
            l_box: l_box / norm,
        },
        OutputGrads { levels: grads },
    ))
}
