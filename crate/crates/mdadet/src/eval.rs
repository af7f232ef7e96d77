//! Detection evaluation: greedy per-image matching at a fixed IoU threshold,
//! all-point interpolated average precision per class, and mAP over the
//! classes that actually appear in the ground truth. Classes with no
//! ground-truth instances are reported as not-present rather than 0, so they
//! cannot drag the mean.

use std::collections::BTreeMap;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::data::{BoundingBox, Detection, DomainDataset};
use crate::det::checkpoint::sha256_hex;
use crate::det::DetectorModel;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::par::{map_ordered, ExecMode};

pub const DEFAULT_EVAL_IOU: f64 = 0.5;

/// Intersection over union; see [`BoundingBox::iou`].
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.iou(b)
}

/// One class's detections/ground truth across a set of images.
/// `image` ids scope the matching: detections only ever match ground truth
/// from their own image.
#[derive(Debug, Clone, Copy)]
pub struct ScoredBox {
    pub image: u64,
    pub bbox: BoundingBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct GtBox {
    pub image: u64,
    pub bbox: BoundingBox,
}

/// All-point interpolated average precision.
///
/// Detections are ranked by descending score (stable on ties); each one
/// greedily takes the still-unmatched ground-truth box in its image with the
/// highest IoU, counting as a true positive if that IoU reaches `iou_thr`.
/// Precision is interpolated to its running maximum from the right and
/// integrated over recall. Returns `None` when there is no ground truth for
/// the class (not present), `Some(0.0)` when there are no detections.
pub fn average_precision(dets: &[ScoredBox], gts: &[GtBox], iou_thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    if dets.is_empty() {
        return Some(0.0);
    }

    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).expect("finite scores"));

    let mut per_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (gi, gt) in gts.iter().enumerate() {
        per_image.entry(gt.image).or_default().push(gi);
    }
    let mut matched = vec![false; gts.len()];

    let n_gt = gts.len() as f64;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut precisions = Vec::with_capacity(dets.len());
    let mut recalls = Vec::with_capacity(dets.len());
    for &di in &order {
        let det = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        if let Some(cands) = per_image.get(&det.image) {
            for &gi in cands {
                if matched[gi] {
                    continue;
                }
                let v = det.bbox.iou(&gts[gi].bbox);
                if best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
        }
        match best {
            Some((gi, v)) if v >= iou_thr => {
                matched[gi] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / n_gt);
    }

    // Right-to-left envelope, then integrate over recall increments.
    for i in (0..precisions.len() - 1).rev() {
        if precisions[i + 1] > precisions[i] {
            precisions[i] = precisions[i + 1];
        }
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precisions.iter().zip(&recalls) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    Some(ap)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassEval {
    pub class_id: usize,
    pub name: String,
    /// `None` marks a class with no ground-truth instances in this domain.
    pub ap: Option<f64>,
    pub num_dets: usize,
    pub num_gts: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainEval {
    pub per_class: Vec<ClassEval>,
    /// Mean AP over present classes only.
    pub map: f64,
    pub num_images: usize,
    pub num_dets: usize,
    pub num_gts: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thr: f64,
    pub score_floor: f64,
    pub nms_iou: f64,
    pub class_names: Vec<String>,
    pub domains: BTreeMap<String, DomainEval>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hash of the canonical JSON form; equal hashes mean equal reports.
    pub fn sha256(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "evaluation @ IoU {:.2} (score floor {:.2}, nms {:.2})\n",
            self.iou_thr, self.score_floor, self.nms_iou
        ));
        for (domain, de) in &self.domains {
            out.push_str(&format!(
                "\n[{domain}] {} images, {} detections, {} gt boxes\n",
                de.num_images, de.num_dets, de.num_gts
            ));
            for ce in &de.per_class {
                match ce.ap {
                    Some(ap) => out.push_str(&format!(
                        "  {:<10} AP {:>7.4}  ({} dets / {} gts)\n",
                        ce.name, ap, ce.num_dets, ce.num_gts
                    )),
                    None => out.push_str(&format!("  {:<10} not present\n", ce.name)),
                }
            }
            out.push_str(&format!("  {:<10} mAP {:>6.4}\n", "==", de.map));
        }
        out
    }

    pub fn domain_map(&self, domain: &str) -> Option<f64> {
        self.domains.get(domain).map(|d| d.map)
    }

    /// Mean of the per-domain mAPs (all domains in the report).
    pub fn mean_map(&self) -> f64 {
        if self.domains.is_empty() {
            return 0.0;
        }
        self.domains.values().map(|d| d.map).sum::<f64>() / self.domains.len() as f64
    }
}

/// Per-class AP over a pool of already-computed detections.
pub fn evaluate_detections(
    dets_by_image: &[(u64, Vec<Detection>)],
    gts_by_image: &[(u64, Vec<crate::data::Annotation>)],
    class_names: &[String],
    iou_thr: f64,
) -> DomainEval {
    let num_classes = class_names.len();
    let mut per_class = Vec::with_capacity(num_classes);
    let mut total_dets = 0;
    let mut total_gts = 0;
    for c in 0..num_classes {
        let dets: Vec<ScoredBox> = dets_by_image
            .iter()
            .flat_map(|(img, ds)| {
                ds.iter().filter(|d| d.class_id == c).map(|d| ScoredBox {
                    image: *img,
                    bbox: d.bbox,
                    score: d.score,
                })
            })
            .collect();
        let gts: Vec<GtBox> = gts_by_image
            .iter()
            .flat_map(|(img, gs)| {
                gs.iter().filter(|g| g.class_id == c).map(|g| GtBox {
                    image: *img,
                    bbox: g.bbox,
                })
            })
            .collect();
        total_dets += dets.len();
        total_gts += gts.len();
        per_class.push(ClassEval {
            class_id: c,
            name: class_names[c].clone(),
            ap: average_precision(&dets, &gts, iou_thr),
            num_dets: dets.len(),
            num_gts: gts.len(),
        });
    }
    let present: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    DomainEval {
        per_class,
        map,
        num_images: gts_by_image.len(),
        num_dets: total_dets,
        num_gts: total_gts,
    }
}

/// Runs the detector over every domain's test split and scores it.
/// Test labels must be open (they always are; only target *train* labels are
/// protocol-poisoned).
pub fn evaluate(
    model: &DetectorModel,
    ps: &ParamStore,
    datasets: &[DomainDataset],
    class_names: &[String],
    iou_thr: f64,
    mode: ExecMode,
) -> Result<EvalReport> {
    if !(0.0 < iou_thr && iou_thr <= 1.0) {
        return Err(Error::Validation(format!(
            "evaluation IoU threshold {iou_thr} outside (0, 1]"
        )));
    }
    if class_names.len() != model.cfg.num_classes {
        return Err(Error::Validation(format!(
            "{} class names for a {}-class model",
            class_names.len(),
            model.cfg.num_classes
        )));
    }
    let mut domains = BTreeMap::new();
    for ds in datasets {
        let mut gts_by_image = Vec::with_capacity(ds.test.len());
        for s in &ds.test {
            let anns = s.labels.try_open().ok_or_else(|| {
                Error::Validation(format!(
                    "test labels for domain '{}' image {} are poisoned",
                    ds.spec.name, s.id
                ))
            })?;
            gts_by_image.push((s.id, anns.to_vec()));
        }
        let images: Vec<(u64, Array3<f64>)> =
            ds.test.iter().map(|s| (s.id, s.pixels.clone())).collect();
        let results = map_ordered(mode, images, |(id, px)| {
            (id, model.infer(ps, &px))
        });
        let mut dets_by_image = Vec::with_capacity(results.len());
        for (id, r) in results {
            dets_by_image.push((id, r?));
        }
        domains.insert(
            ds.spec.name.clone(),
            evaluate_detections(&dets_by_image, &gts_by_image, class_names, iou_thr),
        );
    }
    Ok(EvalReport {
        iou_thr,
        score_floor: model.cfg.score_floor,
        nms_iou: model.cfg.nms_iou,
        class_names: class_names.to_vec(),
        domains,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox {
            x_min: x0,
            y_min: y0,
            x_max: x1,
            y_max: y1,
        }
    }

    fn det(image: u64, bbox: BoundingBox, score: f64) -> ScoredBox {
        ScoredBox { image, bbox, score }
    }

    #[test]
    fn ap_hand_values() {
        let g = bb(0.0, 0.0, 10.0, 10.0);
        let gts = vec![GtBox { image: 1, bbox: g }];

        // Perfect single detection: AP = 1.
        let ap = average_precision(&[det(1, g, 0.9)], &gts, 0.5).unwrap();
        assert_eq!(ap, 1.0);

        // Detection nowhere near: AP = 0.
        let far = bb(50.0, 50.0, 60.0, 60.0);
        let ap = average_precision(&[det(1, far, 0.9)], &gts, 0.5).unwrap();
        assert_eq!(ap, 0.0);

        // Two gts, one matched: precision 1 at recall 0.5 -> AP = 0.5.
        let gts2 = vec![
            GtBox { image: 1, bbox: g },
            GtBox {
                image: 1,
                bbox: bb(20.0, 20.0, 30.0, 30.0),
            },
        ];
        let ap = average_precision(&[det(1, g, 0.9)], &gts2, 0.5).unwrap();
        assert_eq!(ap, 0.5);

        // TP, FP, TP at descending scores over 2 gts:
        // points (0.5, 1), (0.5, 0.5), (1.0, 2/3); envelope keeps 1 then 2/3.
        // AP = 0.5 * 1 + 0.5 * 2/3 = 5/6.
        let dets = vec![
            det(1, g, 0.9),
            det(1, far, 0.8),
            det(1, bb(20.0, 20.0, 30.0, 30.0), 0.7),
        ];
        let ap = average_precision(&dets, &gts2, 0.5).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_and_empty_detections() {
        assert_eq!(average_precision(&[], &[], 0.5), None);
        let gts = vec![GtBox {
            image: 1,
            bbox: bb(0.0, 0.0, 1.0, 1.0),
        }];
        assert_eq!(average_precision(&[], &gts, 0.5), Some(0.0));
    }

    #[test]
    fn matching_is_per_image() {
        let g = bb(0.0, 0.0, 10.0, 10.0);
        let gts = vec![GtBox { image: 1, bbox: g }];
        // Same box but in a different image: cannot match.
        let ap = average_precision(&[det(2, g, 0.9)], &gts, 0.5).unwrap();
        assert_eq!(ap, 0.0);
    }

    #[test]
    fn gt_matches_at_most_once() {
        let g = bb(0.0, 0.0, 10.0, 10.0);
        let gts = vec![GtBox { image: 1, bbox: g }];
        // Second detection on the same gt is a false positive:
        // points (1.0, 1.0), (1.0, 0.5) -> AP = 1.0.
        let dets = vec![det(1, g, 0.9), det(1, g, 0.8)];
        let ap = average_precision(&dets, &gts, 0.5).unwrap();
        assert_eq!(ap, 1.0);
        // Reversed scores: the duplicate comes first and still matches first.
        let dets = vec![det(1, g, 0.8), det(1, g, 0.9)];
        let ap = average_precision(&dets, &gts, 0.5).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn greedy_prefers_highest_iou_gt() {
        // One detection overlapping two gts; it must take the higher-IoU one,
        // leaving the other unmatched.
        let gts = vec![
            GtBox {
                image: 1,
                bbox: bb(0.0, 0.0, 10.0, 10.0),
            },
            GtBox {
                image: 1,
                bbox: bb(2.0, 0.0, 12.0, 10.0),
            },
        ];
        let d = det(1, bb(2.0, 0.0, 12.0, 10.0), 0.9);
        // exact hit on gt[1]
        let ap = average_precision(&[d], &gts, 0.5).unwrap();
        assert_eq!(ap, 0.5);
        // second detection exactly on gt[0] recovers full recall
        let d2 = det(1, bb(0.0, 0.0, 10.0, 10.0), 0.8);
        let ap = average_precision(&[d, d2], &gts, 0.5).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn map_skips_absent_classes() {
        let g = bb(0.0, 0.0, 10.0, 10.0);
        let dets_by_image = vec![(
            1u64,
            vec![Detection {
                bbox: g,
                class_id: 0,
                score: 0.9,
            }],
        )];
        let gts_by_image = vec![(
            1u64,
            vec![crate::data::Annotation {
                bbox: g,
                class_id: 0,
            }],
        )];
        let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let de = evaluate_detections(&dets_by_image, &gts_by_image, &names, 0.5);
        assert_eq!(de.per_class[0].ap, Some(1.0));
        assert_eq!(de.per_class[1].ap, None);
        assert_eq!(de.per_class[2].ap, None);
        // mAP averages only class 0; absent classes do not zero it out.
        assert_eq!(de.map, 1.0);
    }

    #[test]
    fn report_hash_is_stable_and_sensitive() {
        let mk = |mapv: f64| {
            let mut domains = BTreeMap::new();
            domains.insert(
                "t".to_string(),
                DomainEval {
                    per_class: vec![],
                    map: mapv,
                    num_images: 1,
                    num_dets: 0,
                    num_gts: 0,
                },
            );
            EvalReport {
                iou_thr: 0.5,
                score_floor: 0.05,
                nms_iou: 0.5,
                class_names: vec![],
                domains,
            }
        };
        let a = mk(0.25).sha256().unwrap();
        let b = mk(0.25).sha256().unwrap();
        let c = mk(0.75).sha256().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
