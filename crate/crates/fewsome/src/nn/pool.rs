//! Spatial pooling layers.

use crate::Scalar;
use ndarray::{Array2, Array4};

/// Max pooling with floor output sizing; padded cells are excluded from the
/// max rather than treated as zeros.
#[derive(Clone, Copy, Debug)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        assert!(pad < kernel, "padding must be smaller than the kernel");
        Self {
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Returns the pooled output and, per output cell, the flat `iy*w + ix`
    /// index of the winning input cell (needed by the backward scatter).
    pub fn forward<F: Scalar>(&self, x: &Array4<F>) -> (Array4<F>, Array4<u32>) {
        let (b, c, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let mut y = Array4::zeros((b, c, oh, ow));
        let mut arg = Array4::<u32>::zeros((b, c, oh, ow));
        for bi in 0..b {
            for ci in 0..c {
                let plane = x.index_axis(ndarray::Axis(0), bi);
                let plane = plane.index_axis(ndarray::Axis(0), ci);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = F::neg_infinity();
                        let mut best_idx = 0u32;
                        for ky in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let v = plane[[iy as usize, ix as usize]];
                                if v > best {
                                    best = v;
                                    best_idx = (iy as usize * w + ix as usize) as u32;
                                }
                            }
                        }
                        y[[bi, ci, oy, ox]] = best;
                        arg[[bi, ci, oy, ox]] = best_idx;
                    }
                }
            }
        }
        (y, arg)
    }

    pub fn backward<F: Scalar>(
        &self,
        arg: &Array4<u32>,
        input_hw: (usize, usize),
        dy: &Array4<F>,
    ) -> Array4<F> {
        let (b, c, oh, ow) = dy.dim();
        let (h, w) = input_hw;
        let mut dx = Array4::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let flat = arg[[bi, ci, oy, ox]] as usize;
                        dx[[bi, ci, flat / w, flat % w]] += dy[[bi, ci, oy, ox]];
                    }
                }
            }
        }
        dx
    }
}

/// Mean over the spatial dimensions: `(b, c, h, w) -> (b, c)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct GlobalAvgPool;

impl GlobalAvgPool {
    pub fn forward<F: Scalar>(&self, x: &Array4<F>) -> Array2<F> {
        let (b, c, h, w) = x.dim();
        let denom = F::from_f64_c((h * w) as f64);
        let mut y = Array2::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                let mut acc = F::zero();
                for v in x
                    .index_axis(ndarray::Axis(0), bi)
                    .index_axis(ndarray::Axis(0), ci)
                    .iter()
                {
                    acc += *v;
                }
                y[[bi, ci]] = acc / denom;
            }
        }
        y
    }

    pub fn backward<F: Scalar>(&self, input_hw: (usize, usize), dy: &Array2<F>) -> Array4<F> {
        let (b, c) = dy.dim();
        let (h, w) = input_hw;
        let denom = F::from_f64_c((h * w) as f64);
        let mut dx = Array4::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                let g = dy[[bi, ci]] / denom;
                dx.index_axis_mut(ndarray::Axis(0), bi)
                    .index_axis_mut(ndarray::Axis(0), ci)
                    .fill(g);
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{rand_array4, rel_err_norm};
    use ndarray::Dimension;
    use ndarray::Array4;
    use rand_chacha::ChaCha8Rng;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn maxpool_hand_case() {
        // 1x1x4x4 input, 2x2/2 pool
        let x = Array4::from_shape_vec(
            (1, 1, 4, 4),
            vec![
                1.0f64, 2.0, 5.0, 6.0, //
                3.0, 4.0, 7.0, 8.0, //
                -1.0, -2.0, 0.5, 0.25, //
                -3.0, -4.0, 0.75, 0.1,
            ],
        )
        .unwrap();
        let pool = MaxPool2d::new(2, 2, 0);
        let (y, arg) = pool.forward(&x);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y[[0, 0, 0, 0]], 4.0);
        assert_eq!(y[[0, 0, 0, 1]], 8.0);
        assert_eq!(y[[0, 0, 1, 0]], -1.0);
        assert_eq!(y[[0, 0, 1, 1]], 0.75);

        let mut dy = Array4::zeros((1, 1, 2, 2));
        dy.fill(1.0);
        let dx = pool.backward(&arg, (4, 4), &dy);
        assert_eq!(dx[[0, 0, 1, 1]], 1.0); // 4.0 won
        assert_eq!(dx[[0, 0, 1, 3]], 1.0); // 8.0 won
        assert_eq!(dx.sum(), 4.0);
    }

    #[test]
    fn maxpool_padded_ignores_out_of_bounds() {
        // 3x3/2 pad 1 over a 4x4 input -> 2x2 output; corners see 2x2 windows
        let mut x = Array4::zeros((1, 1, 4, 4));
        x.fill(-5.0f64);
        x[[0, 0, 0, 0]] = -1.0;
        let pool = MaxPool2d::new(3, 2, 1);
        let (y, _) = pool.forward(&x);
        assert_eq!(y[[0, 0, 0, 0]], -1.0, "pad cells must not win with 0");
    }

    #[test]
    fn maxpool_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = rand_array4(&mut rng, (2, 2, 5, 6));
        let pool = MaxPool2d::new(3, 2, 1);
        let (y0, arg) = pool.forward(&x);
        let sel = rand_array4(&mut rng, y0.raw_dim().into_pattern());
        let obj = |xv: &Array4<f64>| (pool.forward(xv).0 * &sel).sum();
        let dx = pool.backward(&arg, (5, 6), &sel);
        let h = 1e-6;
        let mut fd = Array4::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            fd.as_slice_mut().unwrap()[idx] = (obj(&xp) - obj(&xm)) / (2.0 * h);
        }
        assert!(rel_err_norm(dx.as_slice().unwrap(), fd.as_slice().unwrap()) < 1e-7);
    }

    #[test]
    fn global_avg_pool_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = rand_array4(&mut rng, (2, 3, 4, 4));
        let gap = GlobalAvgPool;
        let y = gap.forward(&x);
        assert!((y[[0, 0]] - x.index_axis(ndarray::Axis(0), 0).index_axis(ndarray::Axis(0), 0).mean().unwrap()).abs() < 1e-12);
        let mut dy = ndarray::Array2::zeros((2, 3));
        dy.fill(1.0f64);
        let dx = gap.backward((4, 4), &dy);
        assert!((dx[[0, 0, 0, 0]] - 1.0 / 16.0).abs() < 1e-12);
    }
}
