//! Bias-free fully-connected layer.

use crate::Scalar;
use ndarray::Array2;

/// `y = x · Wᵀ` with weight shape `(out_features, in_features)`.
pub struct Linear<F: Scalar> {
    pub weight: Array2<F>,
    pub grad: Array2<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(weight: Array2<F>) -> Self {
        let grad = Array2::zeros(weight.raw_dim());
        Self { weight, grad }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        x.dot(&self.weight.t())
    }

    /// Accumulates `dW += dyᵀ·x` and returns `dx = dy·W`.
    pub fn backward(&mut self, x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
        self.grad = &self.grad + &dy.t().dot(x);
        dy.dot(&self.weight)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{rand_array2, rel_err_norm};
    use rand_chacha::ChaCha8Rng;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_array2(&mut rng, (4, 6));
        let w = rand_array2(&mut rng, (3, 6));
        let sel = rand_array2(&mut rng, (4, 3));
        let obj = |xv: &Array2<f64>, wv: &Array2<f64>| -> f64 {
            (Linear::new(wv.clone()).forward(xv) * &sel).sum()
        };

        let mut lin = Linear::new(w.clone());
        let dx = lin.backward(&x, &sel);

        let h = 1e-6;
        let mut fd_w = Array2::zeros(w.raw_dim());
        for idx in 0..w.len() {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp.as_slice_mut().unwrap()[idx] += h;
            wm.as_slice_mut().unwrap()[idx] -= h;
            fd_w.as_slice_mut().unwrap()[idx] = (obj(&x, &wp) - obj(&x, &wm)) / (2.0 * h);
        }
        assert!(rel_err_norm(lin.grad.as_slice().unwrap(), fd_w.as_slice().unwrap()) < 1e-8);

        let mut fd_x = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            fd_x.as_slice_mut().unwrap()[idx] = (obj(&xp, &w) - obj(&xm, &w)) / (2.0 * h);
        }
        assert!(rel_err_norm(dx.as_slice().unwrap(), fd_x.as_slice().unwrap()) < 1e-8);
    }
}
