//! Elementwise activations.

use crate::Scalar;
use ndarray::{Array, Dimension};

pub fn relu<F: Scalar, D: Dimension>(x: &Array<F, D>) -> Array<F, D> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

/// Gradient of ReLU given its *output* `y` (the mask `y > 0` equals the
/// pre-activation mask except at exactly zero, where the subgradient 0 is
/// used).
pub fn relu_backward<F: Scalar, D: Dimension>(y: &Array<F, D>, dy: &Array<F, D>) -> Array<F, D> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &v| {
        if v <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

pub fn sigmoid<F: Scalar, D: Dimension>(x: &Array<F, D>) -> Array<F, D> {
    x.mapv(|v| F::one() / (F::one() + (-v).exp()))
}

/// Gradient of the logistic sigmoid given its output `y`: `dy * y * (1 - y)`.
pub fn sigmoid_backward<F: Scalar, D: Dimension>(y: &Array<F, D>, dy: &Array<F, D>) -> Array<F, D> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &v| *d = *d * v * (F::one() - v));
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn relu_values_and_grad() {
        let x = arr1(&[-1.0f64, 0.0, 2.5]);
        let y = relu(&x);
        assert_eq!(y, arr1(&[0.0, 0.0, 2.5]));
        let dy = arr1(&[1.0, 1.0, 1.0]);
        assert_eq!(relu_backward(&y, &dy), arr1(&[0.0, 0.0, 1.0]));
    }

    #[test]
    fn sigmoid_range_and_symmetry() {
        let x = arr1(&[-30.0f64, -1.0, 0.0, 1.0, 30.0]);
        let y = sigmoid(&x);
        for &v in y.iter() {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!((y[2] - 0.5).abs() < 1e-12);
        assert!((y[1] + y[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_grad_matches_finite_difference() {
        let x = arr1(&[-0.7f64, 0.3, 1.9]);
        let y = sigmoid(&x);
        let dy = arr1(&[1.0, 1.0, 1.0]);
        let dx = sigmoid_backward(&y, &dy);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (sigmoid(&xp)[i] - sigmoid(&xm)[i]) / (2.0 * h);
            assert!((dx[i] - fd).abs() < 1e-9, "i={i}: {} vs {}", dx[i], fd);
        }
    }
}
