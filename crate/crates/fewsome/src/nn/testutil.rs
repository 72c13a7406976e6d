//! Shared helpers for numeric tests.

use ndarray::{Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_array4(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
    let mut a = Array4::zeros(dim);
    a.mapv_inplace(|_| rng.random::<f64>() * 2.0 - 1.0);
    a
}

pub fn rand_array2(rng: &mut ChaCha8Rng, dim: (usize, usize)) -> Array2<f64> {
    let mut a = Array2::zeros(dim);
    a.mapv_inplace(|_| rng.random::<f64>() * 2.0 - 1.0);
    a
}

/// Relative L2 error between two flat gradients.
pub fn rel_err_norm(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt()
        + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
