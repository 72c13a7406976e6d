//! Parameter enumeration shared by the optimizer, bias audit and checkpoints.

use crate::Scalar;
use ndarray::{ArrayViewD, ArrayViewMutD};

/// Role of a trainable tensor.
///
/// `Bias` and `NormShift` exist so the audit can name an offender if one
/// ever appears; the built-in backbones never construct them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    LinearWeight,
    /// Learnable per-channel scale of a normalisation layer.
    NormScale,
    /// Additive bias of a conv/linear layer.
    Bias,
    /// Additive shift of a normalisation layer.
    NormShift,
}

impl ParamKind {
    /// True for parameters that act additively and could reproduce an
    /// arbitrary constant output from zero weights.
    pub fn is_additive(self) -> bool {
        matches!(self, ParamKind::Bias | ParamKind::NormShift)
    }
}

#[derive(Clone, Debug)]
pub struct ParamMeta {
    pub name: String,
    pub kind: ParamKind,
}

impl ParamMeta {
    pub fn new(name: impl Into<String>, kind: ParamKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

/// A network whose trainable tensors (and persistent buffers, e.g.
/// normalisation running statistics) can be visited in a stable order.
pub trait Parameterized<F: Scalar> {
    fn visit_params(&self, f: &mut dyn FnMut(&ParamMeta, ArrayViewD<'_, F>));

    /// Visits `(meta, value, grad)` triples mutably, in the same order as
    /// [`visit_params`](Self::visit_params).
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&ParamMeta, ArrayViewMutD<'_, F>, ArrayViewMutD<'_, F>));

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        let _ = f;
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        let _ = f;
    }

    fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, _, mut g| g.fill(F::zero()));
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, v| n += v.len());
        n
    }
}

/// Enumerates all trainable tensors and returns the names of any additive
/// (bias or shift) parameters. An empty result certifies bias-freedom.
pub fn audit_bias_free<F: Scalar>(net: &dyn Parameterized<F>) -> Vec<String> {
    let mut offenders = Vec::new();
    net.visit_params(&mut |meta, _| {
        if meta.kind.is_additive() || meta.name.contains("bias") {
            offenders.push(meta.name.clone());
        }
    });
    offenders
}
