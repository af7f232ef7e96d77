//! Anchor grids for the pyramid levels.
//!
//! Each level gets a dense grid with one anchor layout per spatial cell,
//! row-major over (y, x, anchor). Centers sit at (i + 0.5) * stride and the
//! base side length is `base_factor * stride`, so the default single square
//! anchor has sides 32/64/128 on P3/P4/P5.

use serde::{Deserialize, Serialize};

use crate::data::BoundingBox;
use crate::error::{Error, Result};

use super::Level;

fn default_scales() -> Vec<f64> {
    vec![1.0]
}
fn default_ratios() -> Vec<f64> {
    vec![1.0]
}
fn default_base_factor() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    #[serde(default = "default_scales")]
    pub scales: Vec<f64>,
    /// Height/width ratios.
    #[serde(default = "default_ratios")]
    pub ratios: Vec<f64>,
    #[serde(default = "default_base_factor")]
    pub base_factor: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            scales: default_scales(),
            ratios: default_ratios(),
            base_factor: default_base_factor(),
        }
    }
}

impl AnchorConfig {
    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.ratios.is_empty() {
            return Err(Error::Config("anchor scales/ratios must be nonempty".into()));
        }
        if self.scales.iter().chain(self.ratios.iter()).any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("anchor scales/ratios must be positive finite".into()));
        }
        if !(self.base_factor > 0.0) || !self.base_factor.is_finite() {
            return Err(Error::Config("anchor base_factor must be positive finite".into()));
        }
        Ok(())
    }
}

/// Anchors for one feature level, flattened row-major over (y, x, anchor).
#[derive(Debug, Clone)]
pub struct LevelAnchors {
    pub level: Level,
    pub height: usize,
    pub width: usize,
    pub per_cell: usize,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub levels: Vec<LevelAnchors>,
}

impl AnchorSet {
    /// Anchors for an input of size (img_h, img_w). Feature sizes use the
    /// same ceiling division the strided convolutions produce.
    pub fn generate(cfg: &AnchorConfig, levels: &[Level], img_h: usize, img_w: usize) -> AnchorSet {
        let mut out = Vec::with_capacity(levels.len());
        for &level in levels {
            let stride = level.stride();
            let fh = div_ceil(img_h, stride);
            let fw = div_ceil(img_w, stride);
            let base = cfg.base_factor * stride as f64;
            let mut boxes = Vec::with_capacity(fh * fw * cfg.per_cell());
            for y in 0..fh {
                let cy = (y as f64 + 0.5) * stride as f64;
                for x in 0..fw {
                    let cx = (x as f64 + 0.5) * stride as f64;
                    for &scale in &cfg.scales {
                        for &ratio in &cfg.ratios {
                            let w = base * scale / ratio.sqrt();
                            let h = base * scale * ratio.sqrt();
                            boxes.push(BoundingBox {
                                x_min: cx - 0.5 * w,
                                y_min: cy - 0.5 * h,
                                x_max: cx + 0.5 * w,
                                y_max: cy + 0.5 * h,
                            });
                        }
                    }
                }
            }
            out.push(LevelAnchors {
                level,
                height: fh,
                width: fw,
                per_cell: cfg.per_cell(),
                boxes,
            });
        }
        AnchorSet { levels: out }
    }

    pub fn total(&self) -> usize {
        self.levels.iter().map(|l| l.boxes.len()).sum()
    }

    pub fn level(&self, level: Level) -> Option<&LevelAnchors> {
        self.levels.iter().find(|l| l.level == level)
    }
}

pub(crate) fn div_ceil(n: usize, d: usize) -> usize {
    (n + d - 1) / d
}
