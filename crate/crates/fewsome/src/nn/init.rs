//! Seeded Kaiming (He) weight initialisation.

use crate::Scalar;
use ndarray::{Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn fill_normal<F: Scalar>(slice: &mut [F], std: f64, rng: &mut ChaCha8Rng) {
    let dist = Normal::new(0.0, std).expect("valid std");
    for v in slice {
        *v = F::from_f64_c(dist.sample(rng));
    }
}

/// Conv weight `(out_c, in_c, k, k)` ~ N(0, sqrt(2 / fan_in)),
/// fan_in = in_c * k * k.
pub fn kaiming_conv<F: Scalar>(
    out_c: usize,
    in_c: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Array4<F> {
    let std = (2.0 / (in_c * k * k) as f64).sqrt();
    let mut w = Array4::zeros((out_c, in_c, k, k));
    fill_normal(w.as_slice_mut().expect("standard layout"), std, rng);
    w
}

/// Linear weight `(out_f, in_f)` ~ N(0, sqrt(2 / in_f)).
pub fn kaiming_linear<F: Scalar>(out_f: usize, in_f: usize, rng: &mut ChaCha8Rng) -> Array2<F> {
    let std = (2.0 / in_f as f64).sqrt();
    let mut w = Array2::zeros((out_f, in_f));
    fill_normal(w.as_slice_mut().expect("standard layout"), std, rng);
    w
}

/// Uniform in `[0, 1)`; used by tests that need arbitrary valid embeddings.
pub fn uniform_unit<F: Scalar>(n: usize, rng: &mut ChaCha8Rng) -> Vec<F> {
    (0..n).map(|_| F::from_f64_c(rng.random::<f64>())).collect()
}
