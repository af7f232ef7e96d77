//! Minimal f64 neural-network layer library with explicit forward/backward
//! passes. Gradients are accumulated per image into separate buffers and
//! reduced in index order, which keeps training bit-deterministic in both
//! serial and parallel execution.

pub mod conv;
pub mod gradcheck;
pub mod optim;
pub mod params;

pub use conv::{Conv2d, ConvCache};
pub use optim::{clip_global_norm, LrDecay, LrSchedule, OptimKind, Optimizer};
pub use params::{GradStore, ParamId, ParamStore};

use ndarray::Array3;

/// ReLU forward.
pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| if v > 0.0 { v } else { 0.0 })
}

/// ReLU backward given the forward *output* (the mask is `out > 0`).
pub fn relu_backward(out: &Array3<f64>, grad_out: &Array3<f64>) -> Array3<f64> {
    let mut g = grad_out.clone();
    g.zip_mut_with(out, |gv, &ov| {
        if ov <= 0.0 {
            *gv = 0.0;
        }
    });
    g
}

/// Nearest-neighbor 2x upsample, cropped to `(target_h, target_w)`.
///
/// The crop absorbs ceiling-division size mismatches between pyramid levels
/// (2 * ceil(n/2) >= n always holds).
pub fn upsample2x_to(x: &Array3<f64>, target_h: usize, target_w: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    assert!(2 * h >= target_h && 2 * w >= target_w, "upsample cannot shrink");
    let mut out = Array3::zeros((c, target_h, target_w));
    for ci in 0..c {
        for y in 0..target_h {
            for xx in 0..target_w {
                out[[ci, y, xx]] = x[[ci, y / 2, xx / 2]];
            }
        }
    }
    out
}

/// Backward of `upsample2x_to`: sum gradients over replicated positions.
pub fn upsample2x_to_backward(
    grad_out: &Array3<f64>,
    src_h: usize,
    src_w: usize,
) -> Array3<f64> {
    let (c, th, tw) = grad_out.dim();
    let mut g = Array3::zeros((c, src_h, src_w));
    for ci in 0..c {
        for y in 0..th {
            for xx in 0..tw {
                g[[ci, y / 2, xx / 2]] += grad_out[[ci, y, xx]];
            }
        }
    }
    g
}
