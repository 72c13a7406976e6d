//! Adaptive-moment optimizer.

use crate::nn::Parameterized;
use crate::Scalar;
use ndarray::ArrayD;

/// Adam with the standard moment defaults and coupled (L2) weight decay:
/// the decay term `lambda * w` is added to the gradient before the moment
/// updates, matching an L2 penalty `(lambda/2)*||W||^2` on the objective.
pub struct Adam<F: Scalar> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update step from the gradients accumulated in `net`.
    pub fn step(&mut self, net: &mut dyn Parameterized<F>) {
        self.t += 1;
        let lr = F::from_f64_c(self.learning_rate);
        let b1 = F::from_f64_c(self.beta1);
        let b2 = F::from_f64_c(self.beta2);
        let eps = F::from_f64_c(self.eps);
        let wd = F::from_f64_c(self.weight_decay);
        let bc1 = F::from_f64_c(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = F::from_f64_c(1.0 - self.beta2.powi(self.t as i32));
        let one = F::one();

        let mut idx = 0usize;
        let (m, v) = (&mut self.m, &mut self.v);
        net.visit_params_mut(&mut |_, mut w, g| {
            if m.len() == idx {
                m.push(ArrayD::zeros(w.raw_dim()));
                v.push(ArrayD::zeros(w.raw_dim()));
            }
            let mi = &mut m[idx];
            let vi = &mut v[idx];
            ndarray::Zip::from(&mut *mi)
                .and(&mut *vi)
                .and(&mut w)
                .and(&g)
                .for_each(|mm, vv, ww, gg| {
                    let grad = *gg + wd * *ww;
                    *mm = b1 * *mm + (one - b1) * grad;
                    *vv = b2 * *vv + (one - b2) * grad * grad;
                    let mhat = *mm / bc1;
                    let vhat = *vv / bc2;
                    *ww = *ww - lr * mhat / (vhat.sqrt() + eps);
                });
            idx += 1;
        });
    }
}
