//! Compact anchor-based single-stage detector: a 3-stage backbone with named
//! C3/C4/C5 maps, a top-down pyramid producing P3/P4/P5, shared dense heads,
//! focal + smooth-L1 losses, and NMS inference.

pub mod anchors;
pub mod checkpoint;
pub mod losses;
pub mod matching;
pub mod model;

pub use anchors::{AnchorConfig, AnchorSet};
pub use losses::{detection_loss, LossBundle};
pub use model::{DetectorModel, DetectorOutputs, ForwardCache, PyramidTensors};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named feature levels; C and P share strides 8/16/32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    C3,
    C4,
    C5,
    P3,
    P4,
    P5,
}

impl Level {
    pub const ALL: [Level; 6] = [
        Level::C3,
        Level::C4,
        Level::C5,
        Level::P3,
        Level::P4,
        Level::P5,
    ];
    pub const P_LEVELS: [Level; 3] = [Level::P3, Level::P4, Level::P5];

    pub fn stride(self) -> usize {
        match self {
            Level::C3 | Level::P3 => 8,
            Level::C4 | Level::P4 => 16,
            Level::C5 | Level::P5 => 32,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::C3 => "C3",
            Level::C4 => "C4",
            Level::C5 => "C5",
            Level::P3 => "P3",
            Level::P4 => "P4",
            Level::P5 => "P5",
        }
    }

    pub fn parse(s: &str) -> Result<Level> {
        match s.trim().to_ascii_uppercase().as_str() {
            "C3" => Ok(Level::C3),
            "C4" => Ok(Level::C4),
            "C5" => Ok(Level::C5),
            "P3" => Ok(Level::P3),
            "P4" => Ok(Level::P4),
            "P5" => Ok(Level::P5),
            other => Err(Error::Config(format!("unknown feature level '{other}'"))),
        }
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_score_floor() -> f64 {
    0.05
}
fn default_nms_iou() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub num_classes: usize,
    /// Channel widths of the two stem convolutions (strides 2 and 4).
    pub stem_channels: usize,
    pub mid_channels: usize,
    /// Widths of C3/C4/C5.
    pub stage_channels: [usize; 3],
    pub fpn_channels: usize,
    pub head_channels: usize,
    #[serde(default)]
    pub anchor: AnchorConfig,
    #[serde(default = "default_score_floor")]
    pub score_floor: f64,
    #[serde(default = "default_nms_iou")]
    pub nms_iou: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            num_classes: 5,
            stem_channels: 12,
            mid_channels: 20,
            stage_channels: [32, 40, 48],
            fpn_channels: 32,
            head_channels: 32,
            anchor: AnchorConfig::default(),
            score_floor: default_score_floor(),
            nms_iou: default_nms_iou(),
        }
    }
}

impl DetectorConfig {
    /// A deliberately tiny variant for finite-difference tests.
    pub fn tiny(num_classes: usize) -> Self {
        DetectorConfig {
            num_classes,
            stem_channels: 4,
            mid_channels: 5,
            stage_channels: [6, 7, 8],
            fpn_channels: 6,
            head_channels: 6,
            anchor: AnchorConfig::default(),
            score_floor: default_score_floor(),
            nms_iou: default_nms_iou(),
        }
    }

    pub fn channels_at(&self, level: Level) -> usize {
        match level {
            Level::C3 => self.stage_channels[0],
            Level::C4 => self.stage_channels[1],
            Level::C5 => self.stage_channels[2],
            Level::P3 | Level::P4 | Level::P5 => self.fpn_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        for &c in [self.stem_channels, self.mid_channels, self.fpn_channels, self.head_channels]
            .iter()
            .chain(self.stage_channels.iter())
        {
            if c == 0 {
                return Err(Error::Config("channel widths must be >= 1".into()));
            }
        }
        if !(0.0..1.0).contains(&self.score_floor) {
            return Err(Error::Config("score_floor must be in [0, 1)".into()));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::Config("nms_iou must be in (0, 1]".into()));
        }
        self.anchor.validate()
    }
}
