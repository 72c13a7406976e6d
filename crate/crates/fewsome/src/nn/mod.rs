//! Low-level neural-network building blocks.
//!
//! Hand-rolled layers over `ndarray` with explicit forward/backward passes.
//! All layers are bias-free by construction: convolutions and fully-connected
//! layers carry a single weight tensor, and batch normalisation carries a
//! learnable scale but no shift. Gradients accumulate into per-layer buffers
//! and are consumed by [`Adam`].

mod act;
mod adam;
mod conv;
mod init;
mod linear;
mod norm;
mod params;
mod pool;

pub use act::{relu, relu_backward, sigmoid, sigmoid_backward};
pub use adam::Adam;
pub use conv::Conv2d;
pub use init::{kaiming_conv, kaiming_linear};
pub use linear::Linear;
pub use norm::{BatchNorm2d, BnCache};
pub use params::{audit_bias_free, ParamKind, ParamMeta, Parameterized};
pub use pool::{GlobalAvgPool, MaxPool2d};

#[cfg(test)]
pub(crate) mod testutil;
