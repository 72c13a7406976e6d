//! Bias-free embedding backbones and the normalised embedding distance.

mod checkpoint;
mod pretrained;
mod resnet;
mod vgg3;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, LoadedCheckpoint, CHECKPOINT_FORMAT_VERSION,
};
pub use resnet::{ResNet18, ResNetCache};
pub use vgg3::{Vgg3, Vgg3Cache};

use crate::nn::{ParamMeta, Parameterized};
use crate::rngutil::{seeded, STREAM_INIT};
use crate::{Error, Result, Scalar};
use ndarray::{Array1, Array2, Array3, Array4, ArrayViewD, ArrayViewMutD, Axis};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Backbone families supported by the detector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Vgg3,
    #[serde(rename = "resnet18")]
    ResNet18,
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Architecture::Vgg3 => write!(f, "vgg3"),
            Architecture::ResNet18 => write!(f, "resnet18"),
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vgg3" => Ok(Architecture::Vgg3),
            "resnet18" => Ok(Architecture::ResNet18),
            other => Err(Error::Config(format!("unknown architecture '{other}'"))),
        }
    }
}

/// Weight initialisation mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Kaiming,
    Pretrained,
}

impl std::fmt::Display for InitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InitMode::Kaiming => write!(f, "kaiming"),
            InitMode::Pretrained => write!(f, "pretrained"),
        }
    }
}

impl std::str::FromStr for InitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kaiming" => Ok(InitMode::Kaiming),
            "pretrained" => Ok(InitMode::Pretrained),
            other => Err(Error::Config(format!("unknown init mode '{other}'"))),
        }
    }
}

/// Options for [`build_backbone`] beyond the architectural choices.
#[derive(Clone, Debug, Default)]
pub struct BuildOptions {
    /// Seed for Kaiming initialisation (also used for the fresh head under
    /// pretrained init).
    pub seed: u64,
    /// Weights file for [`InitMode::Pretrained`]. Required in that mode;
    /// there is no silent fallback to random init.
    pub pretrained_weights: Option<PathBuf>,
    /// Freeze normalisation running statistics during training.
    pub freeze_norm_stats: bool,
}

/// A 1-D feature embedding; every coordinate lies in the open interval
/// (0, 1) when produced by a sigmoid-terminated network.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding<F: Scalar> {
    values: Array1<F>,
}

impl<F: Scalar> Embedding<F> {
    pub fn new(values: Array1<F>) -> Self {
        Self { values }
    }

    pub fn from_vec(values: Vec<F>) -> Self {
        Self {
            values: Array1::from_vec(values),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &Array1<F> {
        &self.values
    }

    pub fn as_slice(&self) -> &[F] {
        self.values.as_slice().expect("embedding is contiguous")
    }
}

/// Euclidean distance between two embeddings divided by `sqrt(l)`.
///
/// Because sigmoid embeddings live in `(0,1)^l`, the result is bounded in
/// `[0, 1]`, with 1 attained only at opposite corners of the unit cube.
pub fn normalized_distance<F: Scalar>(a: &Embedding<F>, b: &Embedding<F>) -> Result<F> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "embedding lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(normalized_distance_slices(a.as_slice(), b.as_slice()))
}

/// Unchecked fast path over raw coordinate slices of equal length.
pub fn normalized_distance_slices<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        let d = *x - *y;
        acc += d * d;
    }
    acc.sqrt() / F::from_f64_c(a.len() as f64).sqrt()
}

enum Backbone<F: Scalar> {
    Vgg3(Vgg3<F>),
    ResNet18(ResNet18<F>),
}

/// Training-time activation tape; returned by `forward_train` and consumed
/// by `backward`.
pub enum ForwardCache<F: Scalar> {
    Vgg3(Vgg3Cache<F>),
    ResNet18(ResNetCache<F>),
}

/// A bias-free embedding network `f` mapping images to `(0,1)^l`.
pub struct EmbeddingNetwork<F: Scalar> {
    architecture: Architecture,
    embedding_dim: usize,
    init_mode: InitMode,
    input_shape: (usize, usize, usize),
    backbone: Backbone<F>,
}

impl<F: Scalar> std::fmt::Debug for EmbeddingNetwork<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmbeddingNetwork")
            .field("architecture", &self.architecture)
            .field("embedding_dim", &self.embedding_dim)
            .field("init_mode", &self.init_mode)
            .field("input_shape", &self.input_shape)
            .finish_non_exhaustive()
    }
}

/// Embedding dimensions covered by the reference experiments; other values
/// are accepted with a warning.
pub const SUPPORTED_EMBEDDING_DIMS: [usize; 2] = [1024, 2048];

/// Constructs a backbone with the requested architecture, embedding
/// dimension, and initialisation.
///
/// All additive bias parameters are absent by construction, which
/// [`crate::nn::audit_bias_free`] certifies after the build.
pub fn build_backbone<F: Scalar>(
    architecture: Architecture,
    embedding_dim: usize,
    init_mode: InitMode,
    input_shape: (usize, usize, usize),
    opts: &BuildOptions,
) -> Result<EmbeddingNetwork<F>> {
    if !SUPPORTED_EMBEDDING_DIMS.contains(&embedding_dim) {
        log::warn!(
            "embedding_dim {embedding_dim} is outside the benchmarked set {SUPPORTED_EMBEDDING_DIMS:?}"
        );
    }
    let (c, h, w) = input_shape;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!("invalid input shape {input_shape:?}")));
    }
    let mut rng = seeded(opts.seed, STREAM_INIT);
    let mut backbone = match architecture {
        Architecture::Vgg3 => {
            if h < 8 || w < 8 {
                return Err(Error::Config(format!(
                    "vgg3 needs inputs of at least 8x8, got {h}x{w}"
                )));
            }
            Backbone::Vgg3(Vgg3::kaiming(input_shape, embedding_dim, &mut rng))
        }
        Architecture::ResNet18 => {
            let mut net = ResNet18::kaiming(input_shape, embedding_dim, &mut rng);
            net.set_track_running_stats(!opts.freeze_norm_stats);
            Backbone::ResNet18(net)
        }
    };
    if init_mode == InitMode::Pretrained {
        let path = opts.pretrained_weights.as_deref().ok_or_else(|| {
            Error::PretrainedUnavailable(
                "no weights file configured (set pretrained_weights)".into(),
            )
        })?;
        pretrained::load_into(&mut backbone, architecture, path)?;
    }
    let net = EmbeddingNetwork {
        architecture,
        embedding_dim,
        init_mode,
        input_shape,
        backbone,
    };
    let offenders = crate::nn::audit_bias_free(&net);
    debug_assert!(offenders.is_empty(), "bias audit failed: {offenders:?}");
    Ok(net)
}

impl<F: Scalar> EmbeddingNetwork<F> {
    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn init_mode(&self) -> InitMode {
        self.init_mode
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    fn check_and_stack(&self, images: &[Array3<F>]) -> Result<Array4<F>> {
        if images.is_empty() {
            return Err(Error::EmptyInput("no images to embed".into()));
        }
        let (c, h, w) = self.input_shape;
        let mut x = Array4::zeros((images.len(), c, h, w));
        for (i, img) in images.iter().enumerate() {
            let (ic, ih, iw) = img.dim();
            if (ih, iw) != (h, w) || (ic != c && !(ic == 1 && c == 3)) {
                return Err(Error::ShapeMismatch(format!(
                    "image {i} has shape ({ic},{ih},{iw}), network expects ({c},{h},{w})"
                )));
            }
            if ic == 1 && c == 3 {
                // grayscale replicated across RGB so pretrained first-layer
                // filters stay applicable
                for ch in 0..3 {
                    x.index_axis_mut(Axis(0), i)
                        .index_axis_mut(Axis(0), ch)
                        .assign(&img.index_axis(Axis(0), 0));
                }
            } else {
                x.index_axis_mut(Axis(0), i).assign(img);
            }
        }
        Ok(x)
    }

    /// Inference-mode embedding of a stacked batch.
    pub fn embed_batch(&self, x: &Array4<F>) -> Array2<F> {
        match &self.backbone {
            Backbone::Vgg3(net) => net.forward_infer(x),
            Backbone::ResNet18(net) => net.forward_infer(x),
        }
    }

    /// Inference-mode embeddings for a list of images, batched internally.
    /// Deterministic: normalisation layers use running statistics, so
    /// batched and single-sample calls agree.
    pub fn embed(&self, images: &[Array3<F>]) -> Result<Vec<Embedding<F>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let x = self.check_and_stack(chunk)?;
            let emb = self.embed_batch(&x);
            for row in emb.axis_iter(Axis(0)) {
                out.push(Embedding::new(row.to_owned()));
            }
        }
        Ok(out)
    }

    /// Single-image convenience wrapper around [`embed`](Self::embed).
    pub fn embed_one(&self, image: &Array3<F>) -> Result<Embedding<F>> {
        Ok(self
            .embed(std::slice::from_ref(image))?
            .pop()
            .expect("one image in, one embedding out"))
    }

    /// Training-mode forward pass over a stacked batch, returning the
    /// embeddings and the activation tape for [`backward`](Self::backward).
    pub fn forward_train(&mut self, x: &Array4<F>) -> (Array2<F>, ForwardCache<F>) {
        match &mut self.backbone {
            Backbone::Vgg3(net) => {
                let (e, c) = net.forward_train(x);
                (e, ForwardCache::Vgg3(c))
            }
            Backbone::ResNet18(net) => {
                let (e, c) = net.forward_train(x);
                (e, ForwardCache::ResNet18(c))
            }
        }
    }

    /// Backpropagates an embedding gradient, accumulating parameter
    /// gradients in-place.
    pub fn backward(&mut self, cache: &ForwardCache<F>, demb: &Array2<F>) {
        match (&mut self.backbone, cache) {
            (Backbone::Vgg3(net), ForwardCache::Vgg3(c)) => net.backward(c, demb),
            (Backbone::ResNet18(net), ForwardCache::ResNet18(c)) => net.backward(c, demb),
            _ => panic!("forward cache does not match backbone"),
        }
    }

    /// Stacks images with shape checking; exposed for the trainer.
    pub fn stack_inputs(&self, images: &[Array3<F>]) -> Result<Array4<F>> {
        self.check_and_stack(images)
    }
}

impl<F: Scalar> Parameterized<F> for EmbeddingNetwork<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&ParamMeta, ArrayViewD<'_, F>)) {
        match &self.backbone {
            Backbone::Vgg3(net) => net.visit_params(f),
            Backbone::ResNet18(net) => net.visit_params(f),
        }
    }

    fn visit_params_mut(
        &mut self,
        f: &mut dyn FnMut(&ParamMeta, ArrayViewMutD<'_, F>, ArrayViewMutD<'_, F>),
    ) {
        match &mut self.backbone {
            Backbone::Vgg3(net) => net.visit_params_mut(f),
            Backbone::ResNet18(net) => net.visit_params_mut(f),
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        match &self.backbone {
            Backbone::Vgg3(_) => {}
            Backbone::ResNet18(net) => net.visit_buffers(f),
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        match &mut self.backbone {
            Backbone::Vgg3(_) => {}
            Backbone::ResNet18(net) => net.visit_buffers_mut(f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::audit_bias_free;
    use ndarray::Array3;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_images(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Vec<Array3<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut img = Array3::zeros((c, h, w));
                img.mapv_inplace(|_| rng.random::<f32>());
                img
            })
            .collect()
    }

    #[test]
    fn vgg3_embedding_length_and_range() {
        let net = build_backbone::<f32>(
            Architecture::Vgg3,
            1024,
            InitMode::Kaiming,
            (1, 28, 28),
            &BuildOptions::default(),
        )
        .unwrap();
        let imgs = rand_images(2, 1, 28, 28, 1);
        let embs = net.embed(&imgs).unwrap();
        assert_eq!(embs.len(), 2);
        assert_eq!(embs[0].len(), 1024);
        for e in &embs {
            for &v in e.as_slice() {
                assert!(v > 0.0 && v < 1.0, "sigmoid output out of range: {v}");
            }
        }
    }

    #[test]
    fn resnet18_embedding_length() {
        let net = build_backbone::<f32>(
            Architecture::ResNet18,
            2048,
            InitMode::Kaiming,
            (3, 32, 32),
            &BuildOptions::default(),
        )
        .unwrap();
        let imgs = rand_images(2, 3, 32, 32, 2);
        let embs = net.embed(&imgs).unwrap();
        assert_eq!(embs[0].len(), 2048);
    }

    #[test]
    fn networks_are_bias_free() {
        let vgg = build_backbone::<f32>(
            Architecture::Vgg3,
            1024,
            InitMode::Kaiming,
            (1, 28, 28),
            &BuildOptions::default(),
        )
        .unwrap();
        assert!(audit_bias_free(&vgg).is_empty());
        let res = build_backbone::<f32>(
            Architecture::ResNet18,
            2048,
            InitMode::Kaiming,
            (3, 32, 32),
            &BuildOptions::default(),
        )
        .unwrap();
        assert!(audit_bias_free(&res).is_empty());
    }

    #[test]
    fn parameter_counts_match_expectations() {
        let vgg = build_backbone::<f32>(
            Architecture::Vgg3,
            1024,
            InitMode::Kaiming,
            (1, 28, 28),
            &BuildOptions::default(),
        )
        .unwrap();
        let n = vgg.param_count();
        assert!((3_500_000..5_500_000).contains(&n), "vgg3 params = {n}");

        let res = build_backbone::<f32>(
            Architecture::ResNet18,
            2048,
            InitMode::Kaiming,
            (3, 64, 64),
            &BuildOptions::default(),
        )
        .unwrap();
        let n = res.param_count();
        assert!(
            (10_000_000..14_000_000).contains(&n),
            "resnet18 params = {n}"
        );
    }

    #[test]
    fn embedding_deterministic_and_batch_consistent() {
        for (arch, shape) in [
            (Architecture::Vgg3, (1usize, 16usize, 16usize)),
            (Architecture::ResNet18, (3, 32, 32)),
        ] {
            let net = build_backbone::<f32>(
                arch,
                1024,
                InitMode::Kaiming,
                shape,
                &BuildOptions::default(),
            )
            .unwrap();
            let imgs = rand_images(8, shape.0, shape.1, shape.2, 5);
            let batched = net.embed(&imgs).unwrap();
            let again = net.embed(&imgs).unwrap();
            assert_eq!(batched, again, "{arch}: inference must be deterministic");
            let mut max_diff = 0f32;
            for (i, img) in imgs.iter().enumerate() {
                let single = net.embed_one(img).unwrap();
                for (a, b) in batched[i].as_slice().iter().zip(single.as_slice()) {
                    max_diff = max_diff.max((a - b).abs());
                }
            }
            assert!(
                max_diff < 1e-5,
                "{arch}: batch vs single diff {max_diff}"
            );
        }
    }

    #[test]
    fn normalized_distance_contracts() {
        let a = Embedding::from_vec(vec![0.0f64; 4]);
        let b = Embedding::from_vec(vec![1.0f64; 4]);
        // corners of the cube attain the bound exactly: ED = 2, 2/sqrt(4) = 1
        assert!((normalized_distance(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(normalized_distance(&a, &a).unwrap(), 0.0);
        let c = Embedding::from_vec(vec![1.0f64, 0.0, 0.0, 0.0]);
        let z = Embedding::from_vec(vec![0.0f64; 4]);
        assert!((normalized_distance(&c, &z).unwrap() - 0.5).abs() < 1e-12);
        let short = Embedding::from_vec(vec![0.0f64; 3]);
        assert!(normalized_distance(&a, &short).is_err());
    }

    #[test]
    fn grayscale_replication_for_rgb_networks() {
        let net = build_backbone::<f32>(
            Architecture::Vgg3,
            1024,
            InitMode::Kaiming,
            (3, 28, 28),
            &BuildOptions::default(),
        )
        .unwrap();
        let gray = rand_images(1, 1, 28, 28, 3);
        let mut rgb_img = Array3::zeros((3, 28, 28));
        for ch in 0..3 {
            rgb_img
                .index_axis_mut(Axis(0), ch)
                .assign(&gray[0].index_axis(Axis(0), 0));
        }
        let e_gray = net.embed(&gray).unwrap();
        let e_rgb = net.embed(&[rgb_img]).unwrap();
        assert_eq!(e_gray[0], e_rgb[0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let net = build_backbone::<f32>(
            Architecture::Vgg3,
            1024,
            InitMode::Kaiming,
            (1, 28, 28),
            &BuildOptions::default(),
        )
        .unwrap();
        let wrong = rand_images(1, 1, 32, 32, 4);
        assert!(net.embed(&wrong).is_err());
    }

    #[test]
    fn pretrained_without_weights_is_an_explicit_error() {
        let err = build_backbone::<f32>(
            Architecture::Vgg3,
            1024,
            InitMode::Pretrained,
            (3, 32, 32),
            &BuildOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::PretrainedUnavailable(_)));
    }
}
