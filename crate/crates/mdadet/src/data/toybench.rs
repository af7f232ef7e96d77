//! Synthetic multi-domain detection benchmark.
//!
//! One clean rendered source domain plus two camera-styled targets produced
//! by fixed, logged transformation stacks. Five shape classes with
//! class-characteristic colors: the hue-rotation target breaks the color cue
//! while silhouettes survive, which is what gives feature alignment room to
//! help a source-only detector.
//!
//! Determinism: pixels are quantized to the 8-bit grid in memory, so the PNG
//! files on disk reload bit-identically.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::coco::{self, LabelPolicy, Split};
use super::{
    Annotation, BoundingBox, DomainDataset, DomainRole, DomainSpec, ImageSample, Labels,
};
use crate::error::{Error, Result};

pub const SHAPE_NAMES: [&str; 5] = ["circle", "square", "triangle", "plus", "diamond"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    HueRotate { degrees: f64 },
    GaussianBlur { sigma: f64 },
    Contrast { factor: f64 },
    Brightness { delta: f64 },
    Saturation { factor: f64 },
    CropResize { scale: f64 },
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetStack {
    pub name: String,
    pub transforms: Vec<Transform>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyBenchConfig {
    pub num_classes: usize,
    pub image_size: usize,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    /// Shape bounding boxes stay at least this far from every border, so the
    /// crop-style target never cuts a shape.
    pub margin: usize,
    pub min_shape: usize,
    pub max_shape: usize,
    pub max_shapes_per_image: usize,
    pub targets: Vec<TargetStack>,
}

impl Default for ToyBenchConfig {
    fn default() -> Self {
        ToyBenchConfig {
            num_classes: 5,
            image_size: 64,
            train_per_domain: 200,
            test_per_domain: 50,
            margin: 5,
            min_shape: 24,
            max_shape: 38,
            max_shapes_per_image: 2,
            targets: vec![
                TargetStack {
                    name: "target-hue".into(),
                    transforms: vec![
                        Transform::HueRotate { degrees: 140.0 },
                        Transform::GaussianBlur { sigma: 0.9 },
                    ],
                },
                TargetStack {
                    name: "target-crop".into(),
                    transforms: vec![
                        Transform::Contrast { factor: 1.35 },
                        Transform::Brightness { delta: -0.08 },
                        Transform::Saturation { factor: 0.65 },
                        Transform::CropResize { scale: 0.88 },
                    ],
                },
            ],
        }
    }
}

impl ToyBenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > SHAPE_NAMES.len() {
            return Err(Error::Config(format!(
                "num_classes must be in [2, {}]",
                SHAPE_NAMES.len()
            )));
        }
        if self.train_per_domain < 1 || self.test_per_domain < 1 {
            return Err(Error::Config("split sizes must be >= 1".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("at least one target stack required".into()));
        }
        if self.image_size < self.max_shape + 2 * self.margin {
            return Err(Error::Config(
                "image_size too small for max_shape plus margins".into(),
            ));
        }
        if self.min_shape < 8 || self.min_shape > self.max_shape {
            return Err(Error::Config("invalid shape size range".into()));
        }
        for t in &self.targets {
            for tr in &t.transforms {
                if let Transform::CropResize { scale } = tr {
                    let max_margin = self.image_size as f64 * (1.0 - scale) / 2.0;
                    if max_margin > self.margin as f64 {
                        return Err(Error::Config(format!(
                            "crop scale {scale} cuts into the {}px placement margin",
                            self.margin
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        SHAPE_NAMES[..self.num_classes]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }
}

const CLASS_COLORS: [[f64; 3]; 5] = [
    [0.85, 0.20, 0.20], // circle: red
    [0.20, 0.75, 0.25], // square: green
    [0.25, 0.30, 0.85], // triangle: blue
    [0.85, 0.80, 0.20], // plus: yellow
    [0.80, 0.25, 0.80], // diamond: magenta
];

/// Quantizes to the 8-bit grid; PNG round-trips are then exact.
fn quantize(px: &mut Array3<f64>) {
    px.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
}

struct Placed {
    class_id: usize,
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
}

fn boxes_overlap(a: &Placed, b: &Placed, gap: usize) -> bool {
    let ax1 = a.x0 + a.w + gap;
    let ay1 = a.y0 + a.h + gap;
    let bx1 = b.x0 + b.w + gap;
    let by1 = b.y0 + b.h + gap;
    a.x0 < bx1 && b.x0 < ax1 && a.y0 < by1 && b.y0 < ay1
}

/// Pixel-center inside test for each shape, on the shape's own bbox.
fn inside(class_id: usize, x: f64, y: f64, w: f64, h: f64) -> bool {
    // (x, y) in [0, w) x [0, h) local coordinates
    let cx = w / 2.0;
    let cy = h / 2.0;
    match class_id {
        0 => {
            let r = w.min(h) / 2.0;
            (x - cx).powi(2) + (y - cy).powi(2) <= r * r
        }
        1 => true,
        2 => (x - cx).abs() <= y / h * (w / 2.0),
        3 => (x - cx).abs() <= w / 6.0 || (y - cy).abs() <= h / 6.0,
        4 => (x - cx).abs() / (w / 2.0) + (y - cy).abs() / (h / 2.0) <= 1.0,
        _ => unreachable!("class id beyond built-in shapes"),
    }
}

/// Renders one clean image; returns (pixels, annotations, mask pixel counts
/// inside each annotation's box, total mask pixel counts).
fn render_image(
    cfg: &ToyBenchConfig,
    rng: &mut ChaCha8Rng,
) -> (Array3<f64>, Vec<Annotation>, Vec<(usize, usize)>) {
    let n = cfg.image_size;
    let mut px = Array3::zeros((3, n, n));
    // light gray background with pixel noise and a global illumination factor
    let illum: f64 = rng.gen_range(0.94..1.06);
    for y in 0..n {
        for x in 0..n {
            let base = 0.82 + rng.gen_range(-0.02..0.02);
            for c in 0..3 {
                px[[c, y, x]] = base * illum;
            }
        }
    }

    let count = rng.gen_range(1..=cfg.max_shapes_per_image);
    let mut placed: Vec<Placed> = Vec::new();
    for _ in 0..count {
        let mut ok = None;
        for _try in 0..50 {
            let class_id = rng.gen_range(0..cfg.num_classes);
            let w = rng.gen_range(cfg.min_shape..=cfg.max_shape);
            let h = match class_id {
                0 | 1 => w, // circle and square stay square
                _ => {
                    let r: f64 = rng.gen_range(0.78..1.28);
                    ((w as f64 * r).round() as usize).clamp(cfg.min_shape, cfg.max_shape)
                }
            };
            let x0 = rng.gen_range(cfg.margin..=n - cfg.margin - w);
            let y0 = rng.gen_range(cfg.margin..=n - cfg.margin - h);
            let cand = Placed {
                class_id,
                x0,
                y0,
                w,
                h,
            };
            if placed.iter().all(|p| !boxes_overlap(p, &cand, 2)) {
                ok = Some(cand);
                break;
            }
        }
        if let Some(p) = ok {
            placed.push(p);
        }
    }

    let mut annotations = Vec::new();
    let mut mask_counts = Vec::new();
    for p in &placed {
        let jitter: [f64; 3] = [
            rng.gen_range(-0.06..0.06),
            rng.gen_range(-0.06..0.06),
            rng.gen_range(-0.06..0.06),
        ];
        let color: Vec<f64> = CLASS_COLORS[p.class_id]
            .iter()
            .zip(jitter)
            .map(|(c, j)| (c + j) * illum)
            .collect();
        let (mut mx0, mut my0, mut mx1, mut my1) = (usize::MAX, usize::MAX, 0, 0);
        let mut mask_in_box = 0usize;
        for y in 0..p.h {
            for x in 0..p.w {
                if inside(p.class_id, x as f64 + 0.5, y as f64 + 0.5, p.w as f64, p.h as f64) {
                    let (gy, gx) = (p.y0 + y, p.x0 + x);
                    for c in 0..3 {
                        px[[c, gy, gx]] = color[c];
                    }
                    mx0 = mx0.min(gx);
                    my0 = my0.min(gy);
                    mx1 = mx1.max(gx);
                    my1 = my1.max(gy);
                    mask_in_box += 1;
                }
            }
        }
        if mask_in_box == 0 {
            continue; // degenerate rasterization; skip the shape
        }
        // tight box around the rasterized mask: containment is exact
        let bbox = BoundingBox::new(mx0 as f64, my0 as f64, (mx1 + 1) as f64, (my1 + 1) as f64)
            .expect("mask bbox is nonempty");
        annotations.push(Annotation {
            bbox,
            class_id: p.class_id,
        });
        mask_counts.push((mask_in_box, mask_in_box));
    }
    quantize(&mut px);
    (px, annotations, mask_counts)
}

// ---- pixel transforms ----

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / d).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r1, g1, b1) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r1 + m, g1 + m, b1 + m)
}

fn hue_rotate(px: &mut Array3<f64>, degrees: f64) {
    let (_, h, w) = px.dim();
    for y in 0..h {
        for x in 0..w {
            let (hh, s, v) = rgb_to_hsv(px[[0, y, x]], px[[1, y, x]], px[[2, y, x]]);
            let (r, g, b) = hsv_to_rgb(hh + degrees, s, v);
            px[[0, y, x]] = r;
            px[[1, y, x]] = g;
            px[[2, y, x]] = b;
        }
    }
}

fn gaussian_blur(px: &mut Array3<f64>, sigma: f64) {
    let radius = (2.5 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= sum;
    }
    let (c, h, w) = px.dim();
    let reflect = |i: isize, n: isize| -> usize {
        let mut i = i;
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - 1 - i;
        }
        i as usize
    };
    // horizontal then vertical
    let mut tmp = px.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + ki as isize - radius, w as isize);
                    acc += k * px[[ch, y, sx]];
                }
                tmp[[ch, y, x]] = acc;
            }
        }
    }
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + ki as isize - radius, h as isize);
                    acc += k * tmp[[ch, sy, x]];
                }
                px[[ch, y, x]] = acc;
            }
        }
    }
}

fn crop_resize(px: &Array3<f64>, annotations: &[Annotation], scale: f64) -> (Array3<f64>, Vec<Annotation>) {
    let (c, h, w) = px.dim();
    let ch = (h as f64 * scale).round();
    let cw = (w as f64 * scale).round();
    let my = ((h as f64 - ch) / 2.0).floor();
    let mx = ((w as f64 - cw) / 2.0).floor();
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        // nearest-neighbor sample of the crop window
        let sy = (my + (y as f64 + 0.5) * ch / h as f64 - 0.5).round().clamp(0.0, (h - 1) as f64) as usize;
        for x in 0..w {
            let sx = (mx + (x as f64 + 0.5) * cw / w as f64 - 0.5).round().clamp(0.0, (w - 1) as f64) as usize;
            for chn in 0..c {
                out[[chn, y, x]] = px[[chn, sy, sx]];
            }
        }
    }
    let map_x = |v: f64| (v - mx) / cw * w as f64;
    let map_y = |v: f64| (v - my) / ch * h as f64;
    let anns = annotations
        .iter()
        .filter_map(|a| {
            let b = BoundingBox {
                x_min: map_x(a.bbox.x_min),
                y_min: map_y(a.bbox.y_min),
                x_max: map_x(a.bbox.x_max),
                y_max: map_y(a.bbox.y_max),
            };
            b.clip(w as f64, h as f64).map(|bbox| Annotation {
                bbox,
                class_id: a.class_id,
            })
        })
        .collect();
    (out, anns)
}

pub fn apply_transform(
    t: &Transform,
    px: &mut Array3<f64>,
    annotations: &mut Vec<Annotation>,
) {
    match *t {
        Transform::HueRotate { degrees } => hue_rotate(px, degrees),
        Transform::GaussianBlur { sigma } => gaussian_blur(px, sigma),
        Transform::Contrast { factor } => px.mapv_inplace(|v| (v - 0.5) * factor + 0.5),
        Transform::Brightness { delta } => px.mapv_inplace(|v| v + delta),
        Transform::Saturation { factor } => {
            let (_, h, w) = px.dim();
            for y in 0..h {
                for x in 0..w {
                    let l = 0.299 * px[[0, y, x]] + 0.587 * px[[1, y, x]] + 0.114 * px[[2, y, x]];
                    for c in 0..3 {
                        px[[c, y, x]] = l + factor * (px[[c, y, x]] - l);
                    }
                }
            }
        }
        Transform::CropResize { scale } => {
            let (out, anns) = crop_resize(px, annotations, scale);
            *px = out;
            *annotations = anns;
        }
        Transform::Identity => {}
    }
}

pub fn apply_stack(stack: &[Transform], px: &mut Array3<f64>, annotations: &mut Vec<Annotation>) {
    for t in stack {
        apply_transform(t, px, annotations);
    }
    quantize(px);
}

/// Generates all domains with **open** labels everywhere (the writer needs
/// target train labels on disk for oracle runs; the protocol is applied by
/// loaders and by `generate_toy_benchmark`).
pub fn generate_full(cfg: &ToyBenchConfig, rng: &mut ChaCha8Rng) -> Result<Vec<DomainDataset>> {
    cfg.validate()?;
    let mut domains = Vec::new();
    let source_spec = DomainSpec {
        domain_id: 0,
        name: "source".into(),
        role: DomainRole::Source,
        train_labeled: true,
    };
    let mut specs = vec![(source_spec, None)];
    for (i, t) in cfg.targets.iter().enumerate() {
        specs.push((
            DomainSpec {
                domain_id: i + 1,
                name: t.name.clone(),
                role: DomainRole::Target,
                train_labeled: false,
            },
            Some(t.transforms.clone()),
        ));
    }
    for (spec, stack) in specs {
        let make_split = |count: usize, rng: &mut ChaCha8Rng| -> Vec<ImageSample> {
            (0..count)
                .map(|i| {
                    let (mut px, mut anns, _) = render_image(cfg, rng);
                    if let Some(stack) = &stack {
                        apply_stack(stack, &mut px, &mut anns);
                    }
                    ImageSample {
                        id: i as u64 + 1,
                        domain_id: spec.domain_id,
                        pixels: px,
                        labels: Labels::Open(anns),
                    }
                })
                .collect()
        };
        let train = make_split(cfg.train_per_domain, rng);
        let test = make_split(cfg.test_per_domain, rng);
        domains.push(DomainDataset {
            spec,
            train,
            test,
        });
    }
    Ok(domains)
}

/// Poisons target-domain train labels in place (the unsupervised protocol).
pub fn apply_protocol(domains: &mut [DomainDataset]) {
    for d in domains {
        if d.spec.role == DomainRole::Target {
            for s in &mut d.train {
                s.labels = Labels::Poisoned;
            }
        }
    }
}

/// The benchmark as experiments see it: target train splits poisoned.
pub fn generate_toy_benchmark(cfg: &ToyBenchConfig, rng: &mut ChaCha8Rng) -> Result<Vec<DomainDataset>> {
    let mut domains = generate_full(cfg, rng)?;
    apply_protocol(&mut domains);
    Ok(domains)
}

/// Writes the benchmark to disk: per-domain split documents and PNGs plus a
/// key-value manifest recording the generator config and seed.
pub fn write_benchmark(root: &Path, cfg: &ToyBenchConfig, seed: u64) -> Result<()> {
    let mut rng = crate::rng::stream(seed, crate::rng::StreamId::BenchmarkGen);
    let domains = generate_full(cfg, &mut rng)?;
    fs::create_dir_all(root)?;
    let names = cfg.class_names();
    for d in &domains {
        let dir = coco::domain_dir(root, &d.spec);
        fs::create_dir_all(&dir)?;
        coco::write_split(&dir, Split::Train, &d.train, &names)?;
        coco::write_split(&dir, Split::Test, &d.test, &names)?;
    }
    let mut m = String::new();
    writeln!(m, "format = toybench-v1").unwrap();
    writeln!(m, "seed = {seed}").unwrap();
    writeln!(m, "num_classes = {}", cfg.num_classes).unwrap();
    writeln!(m, "classes = {}", names.join(",")).unwrap();
    writeln!(m, "image_size = {}", cfg.image_size).unwrap();
    writeln!(m, "train_per_domain = {}", cfg.train_per_domain).unwrap();
    writeln!(m, "test_per_domain = {}", cfg.test_per_domain).unwrap();
    writeln!(m, "margin = {}", cfg.margin).unwrap();
    writeln!(m, "min_shape = {}", cfg.min_shape).unwrap();
    writeln!(m, "max_shape = {}", cfg.max_shape).unwrap();
    writeln!(m, "max_shapes_per_image = {}", cfg.max_shapes_per_image).unwrap();
    for (i, d) in domains.iter().enumerate() {
        writeln!(m, "domain.{i}.name = {}", d.spec.name).unwrap();
        let role = match d.spec.role {
            DomainRole::Source => "source",
            DomainRole::Target => "target",
        };
        writeln!(m, "domain.{i}.role = {role}").unwrap();
        if d.spec.role == DomainRole::Target {
            let stack = &cfg.targets[i - 1].transforms;
            writeln!(m, "domain.{i}.stack = {}", serde_json::to_string(stack)?).unwrap();
        }
    }
    fs::write(root.join("manifest.txt"), m)?;
    Ok(())
}

/// Reads a benchmark directory written by `write_benchmark`.
pub fn load_benchmark(root: &Path, policy: LabelPolicy) -> Result<(Vec<DomainDataset>, Vec<String>)> {
    let manifest = fs::read_to_string(root.join("manifest.txt"))
        .map_err(|e| Error::Load(format!("cannot read benchmark manifest: {e}")))?;
    let mut kv = BTreeMap::new();
    for line in manifest.lines() {
        if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let classes: Vec<String> = kv
        .get("classes")
        .ok_or_else(|| Error::Load("manifest missing 'classes'".into()))?
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let mut domains = Vec::new();
    for i in 0.. {
        let Some(name) = kv.get(&format!("domain.{i}.name")) else {
            break;
        };
        let role = match kv.get(&format!("domain.{i}.role")).map(String::as_str) {
            Some("source") => DomainRole::Source,
            Some("target") => DomainRole::Target,
            other => {
                return Err(Error::Load(format!(
                    "manifest domain.{i}.role invalid: {other:?}"
                )))
            }
        };
        let spec = DomainSpec {
            domain_id: i,
            name: name.clone(),
            role,
            train_labeled: role == DomainRole::Source,
        };
        let dir = coco::domain_dir(root, &spec);
        domains.push(coco::load_domain(&dir, &spec, policy)?);
    }
    if domains.is_empty() {
        return Err(Error::Load("manifest lists no domains".into()));
    }
    super::validate_domain_set(&domains.iter().map(|d| d.spec.clone()).collect::<Vec<_>>())?;
    Ok((domains, classes))
}
