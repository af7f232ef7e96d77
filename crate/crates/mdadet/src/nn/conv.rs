//! 2-D convolution via im2col + dgemm.
//!
//! Weights are stored as a `(c_out, c_in * k * k)` matrix so forward and both
//! backward products are single matrix multiplications. With kernel 3,
//! padding 1 the output size is `ceil(in / stride)` for stride 1 and 2;
//! kernel 1 keeps the spatial size.

use ndarray::{Array1, Array2, Array3};
use rand_chacha::ChaCha8Rng;

use super::params::{GradStore, ParamId, ParamStore};
use crate::rng::gauss;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Activations saved by `forward_cached` for the backward pass.
pub struct ConvCache {
    cols: Array2<f64>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

pub fn out_size(n: usize, ksize: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - ksize) / stride + 1
}

impl Conv2d {
    /// He-normal weight init, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (c_in * ksize * ksize) as f64;
        let std = (2.0 / fan_in).sqrt();
        let n = c_out * c_in * ksize * ksize;
        let data: Vec<f64> = (0..n).map(|_| gauss(rng) * std).collect();
        let w = Array2::from_shape_vec((c_out, c_in * ksize * ksize), data).unwrap();
        let weight = store.add(format!("{name}.w"), w.into_dyn());
        let bias = store.add(format!("{name}.b"), Array1::<f64>::zeros(c_out).into_dyn());
        Conv2d {
            weight,
            bias,
            c_in,
            c_out,
            ksize,
            stride,
            pad,
        }
    }

    pub fn out_shape(&self, h: usize, w: usize) -> (usize, usize, usize) {
        (
            self.c_out,
            out_size(h, self.ksize, self.stride, self.pad),
            out_size(w, self.ksize, self.stride, self.pad),
        )
    }

    pub fn forward(&self, ps: &ParamStore, x: &Array3<f64>) -> Array3<f64> {
        self.forward_cached(ps, x).0
    }

    pub fn forward_cached(&self, ps: &ParamStore, x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.c_in, "conv input channels");
        let oh = out_size(h, self.ksize, self.stride, self.pad);
        let ow = out_size(w, self.ksize, self.stride, self.pad);
        let cols = im2col(x, self.ksize, self.stride, self.pad, oh, ow);
        let w_mat = ps
            .get(self.weight)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut out_mat = w_mat.dot(&cols);
        let bias = ps
            .get(self.bias)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        for (mut row, b) in out_mat.rows_mut().into_iter().zip(bias.iter()) {
            row += *b;
        }
        let out = out_mat.into_shape_with_order((self.c_out, oh, ow)).unwrap();
        (
            out,
            ConvCache {
                cols,
                in_h: h,
                in_w: w,
                out_h: oh,
                out_w: ow,
            },
        )
    }

    /// Accumulates dW and db into `grads` and returns the gradient with
    /// respect to the input.
    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &ConvCache,
        grad_out: &Array3<f64>,
        grads: &mut GradStore,
    ) -> Array3<f64> {
        let (co, oh, ow) = grad_out.dim();
        assert_eq!((co, oh, ow), (self.c_out, cache.out_h, cache.out_w));
        let g_mat = grad_out
            .view()
            .into_shape_with_order((self.c_out, oh * ow))
            .unwrap();

        let dw = g_mat.dot(&cache.cols.t());
        *grads.get_mut(self.weight) += &dw.into_dyn();
        let db = g_mat.sum_axis(ndarray::Axis(1));
        *grads.get_mut(self.bias) += &db.into_dyn();

        let w_mat = ps
            .get(self.weight)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let d_cols = w_mat.t().dot(&g_mat);
        col2im(
            &d_cols,
            self.c_in,
            cache.in_h,
            cache.in_w,
            self.ksize,
            self.stride,
            self.pad,
            cache.out_h,
            cache.out_w,
        )
    }

    pub fn num_params(&self) -> usize {
        self.c_out * self.c_in * self.ksize * self.ksize + self.c_out
    }
}

fn im2col(
    x: &Array3<f64>,
    ksize: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::zeros((c * ksize * ksize, oh * ow));
    for ci in 0..c {
        for ky in 0..ksize {
            for kx in 0..ksize {
                let row = (ci * ksize + ky) * ksize + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    d_cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    ksize: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..ksize {
            for kx in 0..ksize {
                let row = (ci * ksize + ky) * ksize + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[ci, iy as usize, ix as usize]] += d_cols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    dx
}
