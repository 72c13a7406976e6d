//! Bias-free 2D convolution via im2col + GEMM.

use crate::Scalar;
use ndarray::{Array2, Array4, ArrayView3, ArrayViewMut3, Axis};

/// 2D convolution layer without a bias term.
///
/// Weight layout is `(out_channels, in_channels, kh, kw)`; activations are
/// `(batch, channels, height, width)`. The backward pass recomputes the
/// im2col matrix from the cached layer input instead of retaining it, which
/// keeps the training-time memory footprint proportional to the activations.
pub struct Conv2d<F: Scalar> {
    pub weight: Array4<F>,
    pub grad: Array4<F>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(weight: Array4<F>, stride: usize, pad: usize) -> Self {
        let grad = Array4::zeros(weight.raw_dim());
        Self {
            weight,
            grad,
            stride,
            pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Output spatial size for an input of `(h, w)`.
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let kh = self.weight.shape()[2];
        let kw = self.weight.shape()[3];
        (
            (h + 2 * self.pad - kh) / self.stride + 1,
            (w + 2 * self.pad - kw) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let (b, c, h, w) = x.dim();
        let (oc, ic, kh, kw) = self.weight.dim();
        assert_eq!(c, ic, "conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((oc, ic * kh * kw))
            .expect("weight is standard layout");
        let mut y = Array4::zeros((b, oc, oh, ow));
        let mut cols = Array2::zeros((ic * kh * kw, oh * ow));
        for bi in 0..b {
            im2col(
                x.index_axis(Axis(0), bi),
                kh,
                kw,
                self.stride,
                self.pad,
                &mut cols,
            );
            let out = w2.dot(&cols);
            y.index_axis_mut(Axis(0), bi).assign(
                &out.into_shape_with_order((oc, oh, ow))
                    .expect("gemm output is standard layout"),
            );
        }
        y
    }

    /// Accumulates the weight gradient into `self.grad` and returns the
    /// gradient with respect to the layer input.
    pub fn backward(&mut self, x: &Array4<F>, dy: &Array4<F>) -> Array4<F> {
        let (b, c, h, w) = x.dim();
        let (oc, ic, kh, kw) = self.weight.dim();
        assert_eq!(c, ic, "conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        assert_eq!(dy.dim(), (b, oc, oh, ow), "conv output grad shape");

        let ckk = ic * kh * kw;
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((oc, ckk))
            .expect("weight is standard layout");
        let mut dx = Array4::zeros((b, ic, h, w));
        let mut cols = Array2::zeros((ckk, oh * ow));
        let mut gw = Array2::<F>::zeros((oc, ckk));
        for bi in 0..b {
            im2col(
                x.index_axis(Axis(0), bi),
                kh,
                kw,
                self.stride,
                self.pad,
                &mut cols,
            );
            let dy2 = dy
                .index_axis(Axis(0), bi)
                .into_shape_with_order((oc, oh * ow))
                .expect("dy is standard layout");
            gw = gw + dy2.dot(&cols.t());
            let dcols = w2.t().dot(&dy2);
            col2im_add(
                &dcols,
                kh,
                kw,
                self.stride,
                self.pad,
                dx.index_axis_mut(Axis(0), bi),
            );
        }
        let mut g = self
            .grad
            .view_mut()
            .into_shape_with_order((oc, ckk))
            .expect("grad is standard layout");
        g += &gw;
        dx
    }
}

/// Unfolds one image `(c, h, w)` into `cols` of shape
/// `(c*kh*kw, oh*ow)`; out-of-bounds (padded) taps are zero.
fn im2col<F: Scalar>(
    x: ArrayView3<'_, F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut Array2<F>,
) {
    let (c, h, w) = x.dim();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    debug_assert_eq!(cols.dim(), (c * kh * kw, oh * ow));
    cols.fill(F::zero());
    for ci in 0..c {
        let plane = x.index_axis(Axis(0), ci);
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let mut dst = cols.row_mut(row);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = plane.row(iy as usize);
                    if stride == 1 {
                        // contiguous span of valid ox for this (kx, pad)
                        let lo = pad.saturating_sub(kx);
                        let hi_excl = (w + pad - kx).min(ow);
                        if lo >= hi_excl {
                            continue;
                        }
                        let ix0 = lo + kx - pad;
                        for (o, i) in (lo..hi_excl).zip(ix0..) {
                            dst[oy * ow + o] = src_row[i];
                        }
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds column gradients back onto the input image.
fn col2im_add<F: Scalar>(
    dcols: &Array2<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    mut dx: ArrayViewMut3<'_, F>,
) {
    let (c, h, w) = dx.dim();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    debug_assert_eq!(dcols.dim(), (c * kh * kw, oh * ow));
    for ci in 0..c {
        let mut plane = dx.index_axis_mut(Axis(0), ci);
        for ky in 0..kh {
            for kx in 0..kw {
                let row = dcols.row((ci * kh + ky) * kw + kx);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[[iy, ix as usize]] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}
