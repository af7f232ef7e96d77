//! The detector network.
//!
//! Backbone: three stride-2 stem convs produce C3 (stride 8), then two more
//! stride-2 convs give C4 and C5. A top-down pyramid (1x1 laterals, nearest
//! 2x upsample cropped to the finer map, 3x3 smoothing) yields P3/P4/P5.
//! Classification and box heads (two 3x3 convs each) are shared across
//! levels; the class output bias starts at -ln((1-pi)/pi) with pi = 0.01 so
//! early sigmoid scores sit near the prior.
//!
//! `backward_single` accepts optional extra gradients addressed to any named
//! feature map (C or P level); adversarial branches hook in there without the
//! detector knowing about them.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;

use crate::data::Detection;
use crate::error::{Error, Result};
use crate::nn::{
    relu, relu_backward, upsample2x_to, upsample2x_to_backward, Conv2d, ConvCache, GradStore,
    ParamStore,
};

use super::anchors::AnchorSet;
use super::losses::OutputGrads;
use super::matching::decode_box;
use super::{DetectorConfig, Level};

const CLS_PRIOR: f64 = 0.01;

/// Per-level head outputs flattened to one row per anchor, row-major over
/// (y, x, anchor). `cls` holds logits, `reg` box deltas.
#[derive(Debug, Clone)]
pub struct LevelRows {
    pub level: Level,
    pub height: usize,
    pub width: usize,
    pub per_cell: usize,
    pub cls: Array2<f64>,
    pub reg: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct DetectorOutputs {
    pub levels: Vec<LevelRows>,
}

/// Named feature maps exposed for adversarial attachment and inspection.
#[derive(Debug, Clone)]
pub struct PyramidTensors {
    pub c3: Array3<f64>,
    pub c4: Array3<f64>,
    pub c5: Array3<f64>,
    pub p3: Array3<f64>,
    pub p4: Array3<f64>,
    pub p5: Array3<f64>,
}

impl PyramidTensors {
    pub fn get(&self, level: Level) -> &Array3<f64> {
        match level {
            Level::C3 => &self.c3,
            Level::C4 => &self.c4,
            Level::C5 => &self.c5,
            Level::P3 => &self.p3,
            Level::P4 => &self.p4,
            Level::P5 => &self.p5,
        }
    }
}

struct HeadCache {
    ch_cache: ConvCache,
    ch_out: Array3<f64>,
    co_cache: ConvCache,
    bh_cache: ConvCache,
    bh_out: Array3<f64>,
    bo_cache: ConvCache,
}

/// Everything the backward pass needs from one image's forward pass.
pub struct ForwardCache {
    img_h: usize,
    img_w: usize,
    cc1: ConvCache,
    r1: Array3<f64>,
    cc2: ConvCache,
    r2: Array3<f64>,
    cc3: ConvCache,
    cc4: ConvCache,
    cc5: ConvCache,
    lc3: ConvCache,
    lc4: ConvCache,
    lc5: ConvCache,
    sc3: ConvCache,
    sc4: ConvCache,
    sc5: ConvCache,
    heads: Vec<HeadCache>,
}

#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub cfg: DetectorConfig,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    down4: Conv2d,
    down5: Conv2d,
    lat3: Conv2d,
    lat4: Conv2d,
    lat5: Conv2d,
    smooth3: Conv2d,
    smooth4: Conv2d,
    smooth5: Conv2d,
    cls_hidden: Conv2d,
    cls_out: Conv2d,
    box_hidden: Conv2d,
    box_out: Conv2d,
}

impl DetectorModel {
    pub fn build(cfg: &DetectorConfig, ps: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let [c3w, c4w, c5w] = cfg.stage_channels;
        let f = cfg.fpn_channels;
        let hd = cfg.head_channels;
        let a = cfg.anchor.per_cell();
        let conv1 = Conv2d::new(ps, "det.conv1", 3, cfg.stem_channels, 3, 2, 1, rng);
        let conv2 = Conv2d::new(ps, "det.conv2", cfg.stem_channels, cfg.mid_channels, 3, 2, 1, rng);
        let conv3 = Conv2d::new(ps, "det.conv3", cfg.mid_channels, c3w, 3, 2, 1, rng);
        let down4 = Conv2d::new(ps, "det.down4", c3w, c4w, 3, 2, 1, rng);
        let down5 = Conv2d::new(ps, "det.down5", c4w, c5w, 3, 2, 1, rng);
        let lat3 = Conv2d::new(ps, "det.lat3", c3w, f, 1, 1, 0, rng);
        let lat4 = Conv2d::new(ps, "det.lat4", c4w, f, 1, 1, 0, rng);
        let lat5 = Conv2d::new(ps, "det.lat5", c5w, f, 1, 1, 0, rng);
        let smooth3 = Conv2d::new(ps, "det.smooth3", f, f, 3, 1, 1, rng);
        let smooth4 = Conv2d::new(ps, "det.smooth4", f, f, 3, 1, 1, rng);
        let smooth5 = Conv2d::new(ps, "det.smooth5", f, f, 3, 1, 1, rng);
        let cls_hidden = Conv2d::new(ps, "det.cls_hidden", f, hd, 3, 1, 1, rng);
        let cls_out = Conv2d::new(ps, "det.cls_out", hd, a * cfg.num_classes, 3, 1, 1, rng);
        let box_hidden = Conv2d::new(ps, "det.box_hidden", f, hd, 3, 1, 1, rng);
        let box_out = Conv2d::new(ps, "det.box_out", hd, a * 4, 3, 1, 1, rng);

        // Prior-probability bias so untrained class scores start near pi.
        let prior_bias = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
        ps.get_mut(cls_out.bias).fill(prior_bias);

        Ok(DetectorModel {
            cfg: cfg.clone(),
            conv1,
            conv2,
            conv3,
            down4,
            down5,
            lat3,
            lat4,
            lat5,
            smooth3,
            smooth4,
            smooth5,
            cls_hidden,
            cls_out,
            box_hidden,
            box_out,
        })
    }

    pub fn num_params(&self) -> usize {
        [
            &self.conv1,
            &self.conv2,
            &self.conv3,
            &self.down4,
            &self.down5,
            &self.lat3,
            &self.lat4,
            &self.lat5,
            &self.smooth3,
            &self.smooth4,
            &self.smooth5,
            &self.cls_hidden,
            &self.cls_out,
            &self.box_hidden,
            &self.box_out,
        ]
        .iter()
        .map(|c| c.num_params())
        .sum()
    }

    pub fn anchors_for(&self, img_h: usize, img_w: usize) -> AnchorSet {
        AnchorSet::generate(&self.cfg.anchor, &Level::P_LEVELS, img_h, img_w)
    }

    fn head_forward(
        &self,
        ps: &ParamStore,
        level: Level,
        p: &Array3<f64>,
    ) -> (LevelRows, HeadCache) {
        let (_, h, w) = p.dim();
        let a = self.cfg.anchor.per_cell();
        let (ch_pre, ch_cache) = self.cls_hidden.forward_cached(ps, p);
        let ch_out = relu(&ch_pre);
        let (cls_map, co_cache) = self.cls_out.forward_cached(ps, &ch_out);
        let (bh_pre, bh_cache) = self.box_hidden.forward_cached(ps, p);
        let bh_out = relu(&bh_pre);
        let (reg_map, bo_cache) = self.box_out.forward_cached(ps, &bh_out);
        let rows = LevelRows {
            level,
            height: h,
            width: w,
            per_cell: a,
            cls: maps_to_rows(&cls_map, a, self.cfg.num_classes),
            reg: maps_to_rows(&reg_map, a, 4),
        };
        (
            rows,
            HeadCache {
                ch_cache,
                ch_out,
                co_cache,
                bh_cache,
                bh_out,
                bo_cache,
            },
        )
    }

    /// Full forward pass for one image, keeping the caches backward needs.
    pub fn forward_single(
        &self,
        ps: &ParamStore,
        image: &Array3<f64>,
    ) -> (DetectorOutputs, PyramidTensors, ForwardCache) {
        let (c, img_h, img_w) = image.dim();
        assert_eq!(c, 3, "detector expects 3-channel input");

        let (y1, cc1) = self.conv1.forward_cached(ps, image);
        let r1 = relu(&y1);
        let (y2, cc2) = self.conv2.forward_cached(ps, &r1);
        let r2 = relu(&y2);
        let (y3, cc3) = self.conv3.forward_cached(ps, &r2);
        let c3 = relu(&y3);
        let (y4, cc4) = self.down4.forward_cached(ps, &c3);
        let c4 = relu(&y4);
        let (y5, cc5) = self.down5.forward_cached(ps, &c4);
        let c5 = relu(&y5);

        let (m5, lc5) = self.lat5.forward_cached(ps, &c5);
        let (l4, lc4) = self.lat4.forward_cached(ps, &c4);
        let (l3, lc3) = self.lat3.forward_cached(ps, &c3);
        let (_, h4, w4) = l4.dim();
        let m4 = &l4 + &upsample2x_to(&m5, h4, w4);
        let (_, h3, w3) = l3.dim();
        let m3 = &l3 + &upsample2x_to(&m4, h3, w3);
        let (p3, sc3) = self.smooth3.forward_cached(ps, &m3);
        let (p4, sc4) = self.smooth4.forward_cached(ps, &m4);
        let (p5, sc5) = self.smooth5.forward_cached(ps, &m5);

        let mut levels = Vec::with_capacity(3);
        let mut heads = Vec::with_capacity(3);
        for (level, p) in [(Level::P3, &p3), (Level::P4, &p4), (Level::P5, &p5)] {
            let (rows, hc) = self.head_forward(ps, level, p);
            levels.push(rows);
            heads.push(hc);
        }

        (
            DetectorOutputs { levels },
            PyramidTensors {
                c3,
                c4,
                c5,
                p3,
                p4,
                p5,
            },
            ForwardCache {
                img_h,
                img_w,
                cc1,
                r1,
                cc2,
                r2,
                cc3,
                cc4,
                cc5,
                lc3,
                lc4,
                lc5,
                sc3,
                sc4,
                sc5,
                heads,
            },
        )
    }

    /// Backward pass for one image. `out_grads` carries loss gradients on the
    /// head outputs (absent for images trained only adversarially), and
    /// `feat_grads` carries externally injected gradients on named feature
    /// maps. Parameter gradients accumulate into `grads`.
    pub fn backward_single(
        &self,
        ps: &ParamStore,
        cache: &ForwardCache,
        pyramid: &PyramidTensors,
        out_grads: Option<&OutputGrads>,
        feat_grads: &BTreeMap<Level, Array3<f64>>,
        grads: &mut GradStore,
    ) {
        let a = self.cfg.anchor.per_cell();
        let head_convs = [
            (&self.cls_hidden, &self.cls_out),
            (&self.box_hidden, &self.box_out),
        ];
        let _ = head_convs; // shared weights; used inline below

        let p_tensors = [&pyramid.p3, &pyramid.p4, &pyramid.p5];
        let mut dp: Vec<Array3<f64>> = Vec::with_capacity(3);
        for (i, &level) in Level::P_LEVELS.iter().enumerate() {
            let mut dp_l = Array3::<f64>::zeros(p_tensors[i].raw_dim());
            if let Some(og) = out_grads {
                let (dcls_rows, dreg_rows) = &og.levels[i];
                let hc = &cache.heads[i];
                let (_, h, w) = p_tensors[i].dim();
                let dcls_map = rows_to_maps(dcls_rows, a, self.cfg.num_classes, h, w);
                let d_ch_out = self.cls_out.backward(ps, &hc.co_cache, &dcls_map, grads);
                let d_ch_pre = relu_backward(&hc.ch_out, &d_ch_out);
                dp_l += &self.cls_hidden.backward(ps, &hc.ch_cache, &d_ch_pre, grads);
                let dreg_map = rows_to_maps(dreg_rows, a, 4, h, w);
                let d_bh_out = self.box_out.backward(ps, &hc.bo_cache, &dreg_map, grads);
                let d_bh_pre = relu_backward(&hc.bh_out, &d_bh_out);
                dp_l += &self.box_hidden.backward(ps, &hc.bh_cache, &d_bh_pre, grads);
            }
            if let Some(g) = feat_grads.get(&level) {
                dp_l += g;
            }
            dp.push(dp_l);
        }

        // Smoothing convs back to the merged maps.
        let dm3_s = self.smooth3.backward(ps, &cache.sc3, &dp[0], grads);
        let dm4_s = self.smooth4.backward(ps, &cache.sc4, &dp[1], grads);
        let dm5_s = self.smooth5.backward(ps, &cache.sc5, &dp[2], grads);

        // Merge order: m3 = l3 + up(m4), m4 = l4 + up(m5), m5 = l5.
        let (_, h4, w4) = pyramid.c4.dim();
        let (_, h5, w5) = pyramid.c5.dim();
        let dm3 = dm3_s;
        let dm4 = dm4_s + upsample2x_to_backward(&dm3, h4, w4);
        let dm5 = dm5_s + upsample2x_to_backward(&dm4, h5, w5);
        let dc3_lat = self.lat3.backward(ps, &cache.lc3, &dm3, grads);
        let dc4_lat = self.lat4.backward(ps, &cache.lc4, &dm4, grads);
        let dc5_lat = self.lat5.backward(ps, &cache.lc5, &dm5, grads);

        // Backbone, top of the pyramid first.
        let mut dc5 = dc5_lat;
        if let Some(g) = feat_grads.get(&Level::C5) {
            dc5 += g;
        }
        let d5 = relu_backward(&pyramid.c5, &dc5);
        let mut dc4 = dc4_lat + self.down5.backward(ps, &cache.cc5, &d5, grads);
        if let Some(g) = feat_grads.get(&Level::C4) {
            dc4 += g;
        }
        let d4 = relu_backward(&pyramid.c4, &dc4);
        let mut dc3 = dc3_lat + self.down4.backward(ps, &cache.cc4, &d4, grads);
        if let Some(g) = feat_grads.get(&Level::C3) {
            dc3 += g;
        }
        let d3 = relu_backward(&pyramid.c3, &dc3);
        let dr2 = self.conv3.backward(ps, &cache.cc3, &d3, grads);
        let dr2m = relu_backward(&cache.r2, &dr2);
        let dr1 = self.conv2.backward(ps, &cache.cc2, &dr2m, grads);
        let dr1m = relu_backward(&cache.r1, &dr1);
        let _dx = self.conv1.backward(ps, &cache.cc1, &dr1m, grads);
        let _ = (cache.img_h, cache.img_w);
    }

    /// Detect on one image: sigmoid scores, score floor, per-class NMS over
    /// all levels pooled, final descending score order.
    pub fn infer(&self, ps: &ParamStore, image: &Array3<f64>) -> Result<Vec<Detection>> {
        let (_, img_h, img_w) = image.dim();
        let (outputs, _pyr, _cache) = self.forward_single(ps, image);
        let anchors = self.anchors_for(img_h, img_w);
        let mut candidates: Vec<Detection> = Vec::new();
        for (rows, la) in outputs.levels.iter().zip(&anchors.levels) {
            if rows.cls.iter().chain(rows.reg.iter()).any(|v| !v.is_finite()) {
                return Err(Error::numeric(
                    la.level.name(),
                    "non-finite head outputs during inference",
                ));
            }
            for (i, anchor) in la.boxes.iter().enumerate() {
                for c in 0..self.cfg.num_classes {
                    let score = sigmoid(rows.cls[[i, c]]);
                    if score < self.cfg.score_floor {
                        continue;
                    }
                    let deltas = [
                        rows.reg[[i, 0]],
                        rows.reg[[i, 1]],
                        rows.reg[[i, 2]],
                        rows.reg[[i, 3]],
                    ];
                    let decoded = decode_box(anchor, deltas);
                    if let Some(bbox) = decoded.clip(img_w as f64, img_h as f64) {
                        candidates.push(Detection {
                            bbox,
                            class_id: c,
                            score,
                        });
                    }
                }
            }
        }
        Ok(nms_per_class(candidates, self.cfg.nms_iou, self.cfg.num_classes))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Greedy per-class NMS: keep in descending score order, suppress any later
/// same-class box whose IoU with a kept box strictly exceeds `nms_iou`.
/// Result is globally sorted by descending score (ties keep insertion order).
pub fn nms_per_class(mut dets: Vec<Detection>, nms_iou: f64, num_classes: usize) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for c in 0..num_classes {
        let start = kept.len();
        for d in dets.iter().filter(|d| d.class_id == c) {
            if kept[start..].iter().all(|k| k.bbox.iou(&d.bbox) <= nms_iou) {
                kept.push(*d);
            }
        }
    }
    kept.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
    kept
}

/// Map layout (anchor * item + k, y, x) -> rows ((y * W + x) * A + a, k).
fn maps_to_rows(map: &Array3<f64>, per_cell: usize, item: usize) -> Array2<f64> {
    let (c, h, w) = map.dim();
    debug_assert_eq!(c, per_cell * item);
    let mut out = Array2::zeros((h * w * per_cell, item));
    for ch in 0..c {
        let a = ch / item;
        let k = ch % item;
        for y in 0..h {
            for x in 0..w {
                out[[(y * w + x) * per_cell + a, k]] = map[[ch, y, x]];
            }
        }
    }
    out
}

fn rows_to_maps(
    rows: &Array2<f64>,
    per_cell: usize,
    item: usize,
    h: usize,
    w: usize,
) -> Array3<f64> {
    debug_assert_eq!(rows.nrows(), h * w * per_cell);
    debug_assert_eq!(rows.ncols(), item);
    let mut out = Array3::zeros((per_cell * item, h, w));
    for ch in 0..per_cell * item {
        let a = ch / item;
        let k = ch % item;
        for y in 0..h {
            for x in 0..w {
                out[[ch, y, x]] = rows[[(y * w + x) * per_cell + a, k]];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Annotation, BoundingBox};
    use crate::det::losses::detection_loss;
    use crate::nn::gradcheck::{check_grads, GradCheckSettings};
    use crate::rng::{stream, StreamId};

    fn test_rng() -> ChaCha8Rng {
        stream(7, StreamId::Test)
    }

    #[test]
    fn forward_shapes_and_prior() {
        let cfg = DetectorConfig::default();
        let mut ps = ParamStore::new();
        let model = DetectorModel::build(&cfg, &mut ps, &mut test_rng()).unwrap();
        let img = Array3::<f64>::zeros((3, 64, 64));
        let (out, pyr, _) = model.forward_single(&ps, &img);

        assert_eq!(pyr.c3.dim(), (32, 8, 8));
        assert_eq!(pyr.c4.dim(), (40, 4, 4));
        assert_eq!(pyr.c5.dim(), (48, 2, 2));
        assert_eq!(pyr.p3.dim(), (32, 8, 8));
        assert_eq!(pyr.p5.dim(), (32, 2, 2));

        let sizes: Vec<(usize, usize)> = out
            .levels
            .iter()
            .map(|l| (l.cls.nrows(), l.cls.ncols()))
            .collect();
        assert_eq!(sizes, vec![(64, 5), (16, 5), (4, 5)]);

        // Zero input + zero conv biases: features vanish, class logits sit at
        // the prior, box deltas at zero.
        assert!(pyr.p3.iter().all(|&v| v == 0.0));
        assert!(pyr.p4.iter().all(|&v| v == 0.0));
        assert!(pyr.p5.iter().all(|&v| v == 0.0));
        let prior = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
        for l in &out.levels {
            assert!(l.cls.iter().all(|&v| (v - prior).abs() < 1e-12));
            assert!(l.reg.iter().all(|&v| v == 0.0));
        }
        // sigmoid(prior logit) == pi
        assert!((sigmoid(prior) - CLS_PRIOR).abs() < 1e-12);
    }

    #[test]
    fn rows_map_round_trip() {
        let mut rng = test_rng();
        let map = Array3::from_shape_fn((6, 3, 4), |_| crate::rng::gauss(&mut rng));
        let rows = maps_to_rows(&map, 2, 3);
        assert_eq!(rows.dim(), (24, 3));
        let back = rows_to_maps(&rows, 2, 3, 3, 4);
        assert_eq!(map, back);
        // spot-check the addressing convention
        assert_eq!(rows[[(1 * 4 + 2) * 2 + 1, 0]], map[[3, 1, 2]]);
    }

    #[test]
    fn full_model_gradcheck_small() {
        let cfg = DetectorConfig::tiny(2);
        let mut ps = ParamStore::new();
        let model = DetectorModel::build(&cfg, &mut ps, &mut test_rng()).unwrap();
        assert!(model.num_params() <= 10_000, "gradcheck config too large");

        let mut rng = test_rng();
        let img = Array3::from_shape_fn((3, 16, 16), |_| {
            0.5 + 0.2 * crate::rng::gauss(&mut rng)
        });
        let gts = vec![Annotation {
            bbox: BoundingBox {
                x_min: 1.0,
                y_min: 2.0,
                x_max: 12.0,
                y_max: 14.0,
            },
            class_id: 1,
        }];
        let anchors = model.anchors_for(16, 16);

        let loss_fn = |ps: &ParamStore| {
            let (out, _, _) = model.forward_single(ps, &img);
            detection_loss(&out, &anchors, &gts, cfg.num_classes)
                .unwrap()
                .0
                .total()
        };

        let mut grads = GradStore::zeros_like(&ps);
        let (out, pyr, cache) = model.forward_single(&ps, &img);
        let (_, ograds) = detection_loss(&out, &anchors, &gts, cfg.num_classes).unwrap();
        model.backward_single(&ps, &cache, &pyr, Some(&ograds), &BTreeMap::new(), &mut grads);

        let settings = GradCheckSettings {
            stride: 23,
            ..GradCheckSettings::default()
        };
        let report = check_grads(&ps, &grads.flatten(), settings, loss_fn);
        assert_eq!(
            report.failures, 0,
            "gradcheck failures: worst {:?}",
            report.worst
        );
        assert!(report.checked > 100);
    }

    #[test]
    fn feature_gradients_reach_backbone_without_head_grads() {
        let cfg = DetectorConfig::tiny(2);
        let mut ps = ParamStore::new();
        let model = DetectorModel::build(&cfg, &mut ps, &mut test_rng()).unwrap();
        let mut rng = test_rng();
        let img = Array3::from_shape_fn((3, 16, 16), |_| {
            0.5 + 0.2 * crate::rng::gauss(&mut rng)
        });
        let (_, pyr, cache) = model.forward_single(&ps, &img);

        // Inject a gradient at C3 only; sum(C3) plays the role of the loss.
        let mut feat = BTreeMap::new();
        feat.insert(Level::C3, Array3::ones(pyr.c3.raw_dim()));
        let mut grads = GradStore::zeros_like(&ps);
        model.backward_single(&ps, &cache, &pyr, None, &feat, &mut grads);

        let loss_fn = |ps: &ParamStore| {
            let (_, pyr, _) = model.forward_single(ps, &img);
            pyr.c3.sum()
        };
        let settings = GradCheckSettings {
            stride: 17,
            ..GradCheckSettings::default()
        };
        let report = check_grads(&ps, &grads.flatten(), settings, loss_fn);
        assert_eq!(report.failures, 0, "worst {:?}", report.worst);

        // Stages above C3 must see zero gradient from a C3 hook.
        for (name, g) in ps.iter().map(|(n, _)| n).zip(grads.iter()) {
            let touched = g.iter().any(|&v| v != 0.0);
            let above = name.starts_with("det.down")
                || name.starts_with("det.lat")
                || name.starts_with("det.smooth")
                || name.contains("hidden")
                || name.contains("_out");
            if above {
                assert!(!touched, "{name} should not receive gradient from C3 hook");
            }
        }
    }

    #[test]
    fn nms_suppression_rules() {
        let mk = |x0: f64, score: f64, class_id: usize| Detection {
            bbox: BoundingBox {
                x_min: x0,
                y_min: 0.0,
                x_max: x0 + 10.0,
                y_max: 10.0,
            },
            class_id,
            score,
        };
        // iou(mk(0), mk(2)) = 8/12 = 0.667 > 0.5 -> suppressed
        // iou(mk(0), mk(5)) = 5/15 = 0.333 <= 0.5 -> kept
        let dets = vec![mk(0.0, 0.9, 0), mk(2.0, 0.8, 0), mk(5.0, 0.7, 0), mk(2.0, 0.85, 1)];
        let kept = nms_per_class(dets, 0.5, 2);
        assert_eq!(kept.len(), 3);
        assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(kept.iter().any(|d| d.class_id == 1));
        assert!(!kept.iter().any(|d| (d.score - 0.8).abs() < 1e-12));

        // IoU exactly at the threshold survives (strictly-greater rule).
        // [0,2]x[0,1] vs [0,1]x[0,1]: inter 1, union 2, iou exactly 0.5.
        let a = Detection {
            bbox: BoundingBox {
                x_min: 0.0,
                y_min: 0.0,
                x_max: 2.0,
                y_max: 1.0,
            },
            class_id: 0,
            score: 0.9,
        };
        let mut b = a;
        b.bbox.x_max = 1.0;
        b.score = 0.8;
        assert_eq!(a.bbox.iou(&b.bbox), 0.5);
        let kept = nms_per_class(vec![a, b], 0.5, 1);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn infer_handles_untrained_model() {
        let cfg = DetectorConfig::default();
        let mut ps = ParamStore::new();
        let model = DetectorModel::build(&cfg, &mut ps, &mut test_rng()).unwrap();
        let img = Array3::<f64>::from_elem((3, 64, 64), 0.5);
        // Prior bias keeps all scores near 0.01 < 0.05 floor: no detections,
        // no panic.
        let dets = model.infer(&ps, &img).unwrap();
        assert!(dets.iter().all(|d| d.score >= cfg.score_floor));
    }
}
