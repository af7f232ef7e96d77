//! Brute-force average-precision reference, written independently of the
//! library's evaluator and kept deliberately literal: it re-runs greedy
//! matching from scratch at every distinct score threshold and integrates the
//! precision envelope by scanning all points, instead of the cumulative
//! single-pass formulation used by the real implementation.
//!
//! Scores are assumed tie-free (the randomized test instances draw continuous
//! scores), since the threshold-sweep and per-detection PR conventions can
//! differ on exact ties.

#[derive(Debug, Clone, Copy)]
pub struct ODet {
    pub image: usize,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct OGt {
    pub image: usize,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

fn axis_overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    let lo = if a0 > b0 { a0 } else { b0 };
    let hi = if a1 < b1 { a1 } else { b1 };
    if hi > lo {
        hi - lo
    } else {
        0.0
    }
}

pub fn oracle_iou(d: &ODet, g: &OGt) -> f64 {
    let iw = axis_overlap(d.x0, d.x1, g.x0, g.x1);
    let ih = axis_overlap(d.y0, d.y1, g.y0, g.y1);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let area_d = (d.x1 - d.x0) * (d.y1 - d.y0);
    let area_g = (g.x1 - g.x0) * (g.y1 - g.y0);
    inter / (area_d + area_g - inter)
}

/// Greedy matching over a prefix of the ranked detections, from scratch:
/// every detection takes the unmatched ground truth of its image with the
/// highest IoU >= threshold (first index on ties). Returns the TP count.
fn match_prefix(prefix: &[ODet], gts: &[OGt], iou_thr: f64) -> usize {
    let mut gt_used = vec![false; gts.len()];
    let mut tp = 0;
    for d in prefix {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if g.image != d.image || gt_used[gi] {
                continue;
            }
            let v = oracle_iou(d, g);
            if v >= iou_thr {
                let better = match best {
                    None => true,
                    Some((_, bv)) => v > bv,
                };
                if better {
                    best = Some((gi, v));
                }
            }
        }
        if let Some((gi, _)) = best {
            gt_used[gi] = true;
            tp += 1;
        }
    }
    tp
}

/// All-point interpolated AP via threshold sweep.
pub fn oracle_ap(dets: &[ODet], gts: &[OGt], iou_thr: f64) -> f64 {
    if gts.is_empty() {
        panic!("oracle_ap on a class with no ground truth (callers skip those)");
    }
    if dets.is_empty() {
        return 0.0;
    }
    let mut ranked: Vec<ODet> = dets.to_vec();
    ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());

    // one PR point per distinct score threshold
    let mut points: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
    let mut i = 0;
    while i < ranked.len() {
        let mut j = i + 1;
        while j < ranked.len() && ranked[j].score == ranked[i].score {
            j += 1;
        }
        let prefix = &ranked[..j];
        let tp = match_prefix(prefix, gts, iou_thr);
        let recall = tp as f64 / gts.len() as f64;
        let precision = tp as f64 / prefix.len() as f64;
        points.push((recall, precision));
        i = j;
    }

    // literal envelope integration over unique ascending recall levels
    let mut recalls: Vec<f64> = points.iter().map(|p| p.0).collect();
    recalls.sort_by(|a, b| a.partial_cmp(b).unwrap());
    recalls.dedup();
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for &r in &recalls {
        if r == 0.0 {
            continue;
        }
        let envelope = points
            .iter()
            .filter(|p| p.0 >= r)
            .map(|p| p.1)
            .fold(0.0_f64, f64::max);
        ap += (r - prev_r) * envelope;
        prev_r = r;
    }
    ap
}
