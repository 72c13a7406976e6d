//! Batch normalisation with a learnable scale and no shift.

use crate::Scalar;
use ndarray::{Array1, Array4, Axis};

/// Per-channel batch normalisation: `y = gamma * (x - mu) / sqrt(var + eps)`.
///
/// There is deliberately no learnable shift (`beta`): an additive shift could
/// reproduce an arbitrary constant embedding from all-zero weights, which is
/// exactly the collapse mode the embedding networks must exclude. Running
/// statistics are tracked for inference unless `track_running_stats` is off.
pub struct BatchNorm2d<F: Scalar> {
    pub gamma: Array1<F>,
    pub grad: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub eps: f64,
    pub momentum: f64,
    pub track_running_stats: bool,
}

pub struct BnCache<F: Scalar> {
    xhat: Array4<F>,
    inv_std: Array1<F>,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            grad: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: 1e-5,
            momentum: 0.1,
            track_running_stats: true,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Training-mode forward using batch statistics; updates running
    /// statistics (biased variance normalises, unbiased variance is stored,
    /// matching the usual convention).
    pub fn forward_train(&mut self, x: &Array4<F>) -> (Array4<F>, BnCache<F>) {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batchnorm channels");
        let n = (b * h * w) as f64;
        let nf = F::from_f64_c(n);

        let mut mean = Array1::<F>::zeros(c);
        let mut var = Array1::<F>::zeros(c);
        for ci in 0..c {
            let mut acc = F::zero();
            for bi in 0..b {
                for v in x.index_axis(Axis(0), bi).index_axis(Axis(0), ci).iter() {
                    acc += *v;
                }
            }
            let mu = acc / nf;
            let mut sq = F::zero();
            for bi in 0..b {
                for v in x.index_axis(Axis(0), bi).index_axis(Axis(0), ci).iter() {
                    let d = *v - mu;
                    sq += d * d;
                }
            }
            mean[ci] = mu;
            var[ci] = sq / nf;
        }

        let inv_std = var.mapv(|v| F::one() / (v + F::from_f64_c(self.eps)).sqrt());
        let mut xhat = x.clone();
        for bi in 0..b {
            for ci in 0..c {
                let mu = mean[ci];
                let is = inv_std[ci];
                xhat.index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), ci)
                    .mapv_inplace(|v| (v - mu) * is);
            }
        }
        let mut y = xhat.clone();
        for bi in 0..b {
            for ci in 0..c {
                let g = self.gamma[ci];
                y.index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), ci)
                    .mapv_inplace(|v| v * g);
            }
        }

        if self.track_running_stats {
            let m = F::from_f64_c(self.momentum);
            let one_m = F::one() - m;
            let bessel = if n > 1.0 {
                F::from_f64_c(n / (n - 1.0))
            } else {
                F::one()
            };
            for ci in 0..c {
                self.running_mean[ci] = one_m * self.running_mean[ci] + m * mean[ci];
                self.running_var[ci] = one_m * self.running_var[ci] + m * var[ci] * bessel;
            }
        }

        (y, BnCache { xhat, inv_std })
    }

    /// Inference-mode forward using running statistics; deterministic and
    /// batch-size independent.
    pub fn forward_infer(&self, x: &Array4<F>) -> Array4<F> {
        let (b, c, _, _) = x.dim();
        assert_eq!(c, self.channels(), "batchnorm channels");
        let mut y = x.clone();
        for ci in 0..c {
            let mu = self.running_mean[ci];
            let is = F::one() / (self.running_var[ci] + F::from_f64_c(self.eps)).sqrt();
            let g = self.gamma[ci];
            for bi in 0..b {
                y.index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), ci)
                    .mapv_inplace(|v| (v - mu) * is * g);
            }
        }
        y
    }

    /// Full backward through the batch statistics; accumulates `dgamma` and
    /// returns `dx`.
    pub fn backward(&mut self, cache: &BnCache<F>, dy: &Array4<F>) -> Array4<F> {
        let (b, c, h, w) = dy.dim();
        let n = F::from_f64_c((b * h * w) as f64);
        let mut dx = Array4::zeros((b, c, h, w));
        for ci in 0..c {
            let g = self.gamma[ci];
            let is = cache.inv_std[ci];

            let mut sum_dxhat = F::zero();
            let mut sum_dxhat_xhat = F::zero();
            let mut dgamma = F::zero();
            for bi in 0..b {
                let dyp = dy.index_axis(Axis(0), bi);
                let dyp = dyp.index_axis(Axis(0), ci);
                let xh = cache.xhat.index_axis(Axis(0), bi);
                let xh = xh.index_axis(Axis(0), ci);
                for (d, x) in dyp.iter().zip(xh.iter()) {
                    dgamma += *d * *x;
                    let dxhat = *d * g;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * *x;
                }
            }
            self.grad[ci] += dgamma;

            let scale = is / n;
            for bi in 0..b {
                let dyp = dy.index_axis(Axis(0), bi);
                let dyp = dyp.index_axis(Axis(0), ci).to_owned();
                let xh = cache.xhat.index_axis(Axis(0), bi);
                let xh = xh.index_axis(Axis(0), ci).to_owned();
                let mut out = dx.index_axis_mut(Axis(0), bi);
                let mut out = out.index_axis_mut(Axis(0), ci);
                for ((o, d), x) in out.iter_mut().zip(dyp.iter()).zip(xh.iter()) {
                    let dxhat = *d * g;
                    *o = scale * (n * dxhat - sum_dxhat - *x * sum_dxhat_xhat);
                }
            }
        }
        dx
    }
}
