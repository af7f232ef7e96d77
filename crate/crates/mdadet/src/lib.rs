//! Multi-target domain-adaptive object detection on a synthetic desk-scale
//! benchmark: pluggable pixel-level translation, adversarial feature
//! alignment through a gradient reversal layer, and threshold-scheduled
//! self-training, with an oracle-checked evaluation harness.

pub mod adv;
pub mod data;
pub mod det;
pub mod error;
pub mod eval;
pub mod exp;
pub mod nn;
pub mod par;
pub mod pixeladapt;
pub mod rng;
pub mod selftrain;
pub mod train;

pub use error::{Error, Result};
