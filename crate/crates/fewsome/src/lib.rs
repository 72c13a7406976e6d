//! Few-shot one-class anomaly detection on tiny Reference Sets.
//!
//! A small set of normal images (the "Reference Set") is embedded by a
//! bias-free convolutional backbone ending in a sigmoid layer. Training
//! minimises the distance between Reference embeddings plus a weighted
//! distance to a frozen "anchor" embedding captured before the first
//! weight update; the anchor is a gradient-blocked constant and prevents
//! the network from collapsing to the all-zero solution. Test samples are
//! scored by their distance to the nearest Reference embedding plus the
//! weighted anchor distance.
//!
//! The crate is organised as:
//! - [`datasets`]: benchmark loaders, normal/anomaly splits, Reference Set
//!   sampling and contamination injection
//! - [`model`]: bias-free backbones (VGG-3, ResNet-18) and the
//!   `√l`-normalised embedding distance
//! - [`loss`]: per-instance distance loss, batch objective and pair mining
//! - [`trainer`]: the training loop with anchor capture, early stopping and
//!   collapse diagnostics
//! - [`scoring`]: anomaly scores, ROC AUC, F1 and balanced accuracy under
//!   the fixed-percentile threshold rule
//! - [`experiments`]: the study runner (benchmark, size sweep,
//!   contamination sweep, ablation, sensitivity) with persistent run
//!   records and plot emission
//!
//! All numeric core code is generic over the scalar type via [`Scalar`];
//! the experiment harness instantiates it at [`Real`].

pub mod datasets;
pub mod error;
pub(crate) mod rngutil;
pub mod experiments;
pub mod loss;
pub mod model;
pub mod nn;
pub mod scoring;
pub mod trainer;

pub use error::{Error, Result};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating-point scalar used by the numeric core: `f32` or `f64`.
///
/// `f32` is the working precision for experiment runs; `f64` is used by
/// tests that compare analytic gradients against central finite
/// differences, where `f32` rounding would drown the signal.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssignOps
    + ScalarOperand
    + LinalgScalar
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Conversion from `f64` for constants and config values.
    fn from_f64_c(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to scalar")
    }
    /// Widening conversion for metric accumulation.
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Working precision of the experiment harness and CLI.
pub type Real = f32;

// (concrete type aliases land once model/trainer exist)


