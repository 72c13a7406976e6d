//! Benchmark dataset loading, anomaly-detection splits, Reference Set
//! sampling and contamination injection.
//!
//! All functions are pure over immutable inputs and safe to call from
//! concurrent experiment workers; randomness always comes from explicit
//! seeds.

mod cifar;
mod idx;
pub mod manifest;
mod mvtec;

pub use manifest::{DatasetEntry, DatasetManifest, MANIFEST_FILE};
pub use mvtec::{list_categories, load_category, CategoryData, GOOD_LABEL};

#[cfg(test)]
pub(crate) use idx::fixtures as idx_fixtures;

use crate::rngutil::{seeded, STREAM_CONTAMINATION, STREAM_SAMPLING, STREAM_SPLIT};
use crate::{Error, Result, Scalar};
use ndarray::{Array3, Axis};
use rand::seq::index::sample as index_sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

/// The four benchmark datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    Mnist,
    Fmnist,
    Cifar10,
    Mvtec,
}

impl DatasetId {
    pub fn dir_name(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::Fmnist => "fmnist",
            DatasetId::Cifar10 => "cifar10",
            DatasetId::Mvtec => "mvtec",
        }
    }

    /// Input tensor shape after [`preprocess`] (channels, height, width).
    pub fn preprocessed_shape(self) -> (usize, usize, usize) {
        match self {
            DatasetId::Mnist | DatasetId::Fmnist => (1, 28, 28),
            DatasetId::Cifar10 => (3, 32, 32),
            DatasetId::Mvtec => (3, 128, 128),
        }
    }
}

impl std::fmt::Display for DatasetId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl std::str::FromStr for DatasetId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetId::Mnist),
            "fmnist" | "fashion-mnist" | "fashionmnist" => Ok(DatasetId::Fmnist),
            "cifar10" | "cifar-10" => Ok(DatasetId::Cifar10),
            "mvtec" | "mvtec-ad" => Ok(DatasetId::Mvtec),
            other => Err(Error::Config(format!("unknown dataset '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// A set of equally-shaped images with per-image class labels, pixel values
/// in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct LabeledImageSet<F: Scalar> {
    images: Vec<Array3<F>>,
    labels: Vec<u32>,
    pub split: Split,
    pub dataset_id: DatasetId,
    /// Human-readable names per label id (MVTec defect folders); absent for
    /// the digit/object datasets.
    pub label_names: Option<Vec<String>>,
}

impl<F: Scalar> LabeledImageSet<F> {
    pub fn new(
        images: Vec<Array3<F>>,
        labels: Vec<u32>,
        split: Split,
        dataset_id: DatasetId,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Config(format!(
                "images ({}) and labels ({}) differ in count",
                images.len(),
                labels.len()
            )));
        }
        if let Some(first) = images.first() {
            let dim = first.dim();
            if let Some(bad) = images.iter().position(|img| img.dim() != dim) {
                return Err(Error::Config(format!(
                    "image {bad} has shape {:?}, expected {:?}",
                    images[bad].dim(),
                    dim
                )));
            }
        }
        Ok(Self {
            images,
            labels,
            split,
            dataset_id,
            label_names: None,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Array3<F>] {
        &self.images
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &Array3<F> {
        &self.images[i]
    }

    /// Distinct labels present, ascending.
    pub fn classes(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.labels.iter().copied().collect();
        set.into_iter().collect()
    }

    fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
            dataset_id: self.dataset_id,
            label_names: self.label_names.clone(),
        }
    }
}

/// Test samples with binary anomaly ground truth.
#[derive(Clone, Debug)]
pub struct TestSet<F: Scalar> {
    pub samples: Vec<Array3<F>>,
    pub is_anomaly: Vec<bool>,
    /// Position of each sample in the official test split, for audit.
    pub source_indices: Vec<usize>,
}

impl<F: Scalar> TestSet<F> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Seeded, class-proportional subsample for desk-scale evaluation.
    /// Keeps the anomaly prevalence of the full split (up to rounding).
    pub fn subsample(&self, max_samples: usize, seed: u64) -> Self {
        if max_samples >= self.len() {
            return self.clone();
        }
        let mut rng = seeded(seed, crate::rngutil::STREAM_EVAL);
        let anomalies: Vec<usize> = (0..self.len()).filter(|&i| self.is_anomaly[i]).collect();
        let normals: Vec<usize> = (0..self.len()).filter(|&i| !self.is_anomaly[i]).collect();
        let frac = max_samples as f64 / self.len() as f64;
        let take_norm = ((normals.len() as f64 * frac).round() as usize).clamp(1, normals.len());
        let take_anom = (max_samples - take_norm).clamp(1, anomalies.len());
        let mut chosen: Vec<usize> = index_sample(&mut rng, normals.len(), take_norm)
            .into_iter()
            .map(|i| normals[i])
            .chain(
                index_sample(&mut rng, anomalies.len(), take_anom)
                    .into_iter()
                    .map(|i| anomalies[i]),
            )
            .collect();
        chosen.sort_unstable();
        TestSet {
            samples: chosen.iter().map(|&i| self.samples[i].clone()).collect(),
            is_anomaly: chosen.iter().map(|&i| self.is_anomaly[i]).collect(),
            source_indices: chosen.iter().map(|&i| self.source_indices[i]).collect(),
        }
    }
}

/// The N normal training samples a model is trained on, with provenance.
#[derive(Clone, Debug)]
pub struct ReferenceSet<F: Scalar> {
    pub samples: Vec<Array3<F>>,
    pub normal_class: u32,
    pub seed: u64,
    /// Positions replaced by anomalies during contamination.
    pub contaminated_indices: BTreeSet<usize>,
    /// Position of the anchor sample; fixed to 0 by convention (the choice
    /// is reported not to matter) and never replaced by contamination.
    pub anchor_index: usize,
    pub dataset_id: DatasetId,
    /// Positions of the chosen samples in the pool they were drawn from.
    pub source_indices: Vec<usize>,
}

impl<F: Scalar> ReferenceSet<F> {
    pub fn size(&self) -> usize {
        self.samples.len()
    }

    pub fn anchor_sample(&self) -> &Array3<F> {
        &self.samples[self.anchor_index]
    }
}

fn dataset_dir(id: DatasetId, root: &Path) -> PathBuf {
    // accept either <root> holding the files directly or <root>/<dataset>/
    let nested = root.join(id.dir_name());
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

/// Loads the official train/test partition of a class-labelled dataset;
/// pixel values are scaled to `[0, 1]`.
///
/// MVTec is organised per category; use [`load_mvtec_category_sets`].
pub fn load_dataset<F: Scalar>(
    id: DatasetId,
    root: &Path,
) -> Result<(LabeledImageSet<F>, LabeledImageSet<F>)> {
    match id {
        DatasetId::Mnist | DatasetId::Fmnist => {
            let dir = dataset_dir(id, root);
            let train_images = idx::read_idx_images(&dir.join("train-images-idx3-ubyte"))?;
            let train_labels = idx::read_idx_labels(&dir.join("train-labels-idx1-ubyte"))?;
            let test_images = idx::read_idx_images(&dir.join("t10k-images-idx3-ubyte"))?;
            let test_labels = idx::read_idx_labels(&dir.join("t10k-labels-idx1-ubyte"))?;
            Ok((
                LabeledImageSet::new(train_images, train_labels, Split::Train, id)?,
                LabeledImageSet::new(test_images, test_labels, Split::Test, id)?,
            ))
        }
        DatasetId::Cifar10 => {
            let dir = {
                let d = dataset_dir(id, root);
                let batches = d.join("cifar-10-batches-bin");
                if batches.is_dir() {
                    batches
                } else {
                    d
                }
            };
            let mut train_images = Vec::new();
            let mut train_labels = Vec::new();
            for name in cifar::TRAIN_BATCHES {
                let (mut imgs, mut lbls) = cifar::read_batch(&dir.join(name))?;
                train_images.append(&mut imgs);
                train_labels.append(&mut lbls);
            }
            let (test_images, test_labels) = cifar::read_batch(&dir.join(cifar::TEST_BATCH))?;
            Ok((
                LabeledImageSet::new(train_images, train_labels, Split::Train, id)?,
                LabeledImageSet::new(test_images, test_labels, Split::Test, id)?,
            ))
        }
        DatasetId::Mvtec => Err(Error::Config(
            "mvtec is organised per category; call load_mvtec_category_sets".into(),
        )),
    }
}

/// Loads one MVTec category as labelled train/test sets (native resolution;
/// label 0 = good, defects numbered from 1).
pub fn load_mvtec_category_sets<F: Scalar>(
    root: &Path,
    category: &str,
) -> Result<(LabeledImageSet<F>, LabeledImageSet<F>)> {
    let dir = dataset_dir(DatasetId::Mvtec, root);
    let data = mvtec::load_category(&dir, category)?;
    let mut train = LabeledImageSet::new(
        data.train_images,
        data.train_labels,
        Split::Train,
        DatasetId::Mvtec,
    )?;
    let mut test = LabeledImageSet::new(
        data.test_images,
        data.test_labels,
        Split::Test,
        DatasetId::Mvtec,
    )?;
    train.label_names = Some(data.label_names.clone());
    test.label_names = Some(data.label_names);
    Ok((train, test))
}

/// Splits a loaded dataset into the one-class training pool and the
/// anomaly-labelled test set: the normal pool keeps only training images of
/// `normal_class`; the full official test split is labelled
/// `is_anomaly = (label != normal_class)`.
pub fn make_normal_split<F: Scalar>(
    train: &LabeledImageSet<F>,
    test: &LabeledImageSet<F>,
    normal_class: u32,
) -> Result<(LabeledImageSet<F>, TestSet<F>)> {
    let pool_indices: Vec<usize> = (0..train.len())
        .filter(|&i| train.labels[i] == normal_class)
        .collect();
    if pool_indices.is_empty() {
        return Err(Error::Config(format!(
            "class {normal_class} not present in the training split"
        )));
    }
    let normal_pool = train.subset(&pool_indices);

    let is_anomaly: Vec<bool> = test.labels.iter().map(|&l| l != normal_class).collect();
    let anomalies = is_anomaly.iter().filter(|&&a| a).count();
    if anomalies == 0 {
        return Err(Error::Config(
            "degenerate split: test set contains no anomalous samples".into(),
        ));
    }
    if anomalies == test.len() {
        return Err(Error::Config(
            "degenerate split: test set contains no normal samples".into(),
        ));
    }
    let test_set = TestSet {
        samples: test.images.clone(),
        is_anomaly,
        source_indices: (0..test.len()).collect(),
    };
    Ok((normal_pool, test_set))
}

/// Uniformly samples `n` distinct images from the normal pool, fully
/// determined by `seed`. The anchor is the first sampled element.
pub fn sample_reference_set<F: Scalar>(
    normal_pool: &LabeledImageSet<F>,
    normal_class: u32,
    n: usize,
    seed: u64,
) -> Result<ReferenceSet<F>> {
    if n < 2 {
        return Err(Error::Config(format!(
            "reference set needs at least 2 samples, got {n}"
        )));
    }
    if n > normal_pool.len() {
        return Err(Error::Config(format!(
            "reference size {n} exceeds pool size {}",
            normal_pool.len()
        )));
    }
    let mut rng = seeded(seed, STREAM_SAMPLING);
    let chosen: Vec<usize> = index_sample(&mut rng, normal_pool.len(), n).into_vec();
    Ok(ReferenceSet {
        samples: chosen
            .iter()
            .map(|&i| normal_pool.images[i].clone())
            .collect(),
        normal_class,
        seed,
        contaminated_indices: BTreeSet::new(),
        anchor_index: 0,
        dataset_id: normal_pool.dataset_id,
        source_indices: chosen,
    })
}

/// Replaces `ceil(rate * N)` uniformly chosen Reference samples (never the
/// anchor) with uniformly chosen images from `anomaly_pool`.
///
/// Rounding up means even 1% contamination of N=30 injects one anomaly.
pub fn contaminate<F: Scalar>(
    reference_set: &ReferenceSet<F>,
    anomaly_pool: &LabeledImageSet<F>,
    rate: f64,
    seed: u64,
) -> Result<ReferenceSet<F>> {
    if !(0.0..0.5).contains(&rate) {
        return Err(Error::Config(format!(
            "contamination rate {rate} outside [0, 0.5)"
        )));
    }
    let n = reference_set.size();
    let count = (rate * n as f64).ceil() as usize;
    let mut out = reference_set.clone();
    out.contaminated_indices.clear();
    if count == 0 {
        return Ok(out);
    }
    if anomaly_pool.is_empty() {
        return Err(Error::Config("anomaly pool is empty".into()));
    }

    let mut rng = seeded(seed, STREAM_CONTAMINATION);
    // victims drawn from [0, N) minus the anchor position
    let eligible: Vec<usize> = (0..n)
        .filter(|&i| i != reference_set.anchor_index)
        .collect();
    if count > eligible.len() {
        return Err(Error::Config(format!(
            "cannot contaminate {count} of {n} samples while sparing the anchor"
        )));
    }
    let victims: Vec<usize> = index_sample(&mut rng, eligible.len(), count)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    let replacements: Vec<usize> = if anomaly_pool.len() >= count {
        index_sample(&mut rng, anomaly_pool.len(), count).into_vec()
    } else {
        (0..count)
            .map(|_| rng.random_range(0..anomaly_pool.len()))
            .collect()
    };
    for (&victim, &source) in victims.iter().zip(&replacements) {
        out.samples[victim] = anomaly_pool.images[source].clone();
        out.contaminated_indices.insert(victim);
    }
    Ok(out)
}

/// ImageNet channel statistics used by the published pretrained weights.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Maps a loader-native image to the network input tensor for its dataset:
/// identity for the 28x28/32x32 datasets, bilinear 128x128 resize for MVTec.
/// Under pretrained initialisation, grayscale is replicated to three
/// channels and the ImageNet channel statistics are applied.
pub fn preprocess<F: Scalar>(
    image: &Array3<F>,
    dataset_id: DatasetId,
    pretrained: bool,
) -> Result<Array3<F>> {
    let (c, h, w) = image.dim();
    let mut out = match dataset_id {
        DatasetId::Mnist | DatasetId::Fmnist => {
            if c != 1 || h != 28 || w != 28 {
                return Err(Error::ShapeMismatch(format!(
                    "{dataset_id} images must be (1,28,28), got ({c},{h},{w})"
                )));
            }
            image.clone()
        }
        DatasetId::Cifar10 => {
            if c != 3 || h != 32 || w != 32 {
                return Err(Error::ShapeMismatch(format!(
                    "cifar10 images must be (3,32,32), got ({c},{h},{w})"
                )));
            }
            image.clone()
        }
        DatasetId::Mvtec => {
            if c != 3 {
                return Err(Error::ShapeMismatch(format!(
                    "mvtec images must have 3 channels, got {c}"
                )));
            }
            resize_bilinear(image, 128, 128)
        }
    };
    if pretrained {
        if out.dim().0 == 1 {
            let plane = out.index_axis(Axis(0), 0).to_owned();
            let (_, oh, ow) = out.dim();
            let mut rgb = Array3::zeros((3, oh, ow));
            for ch in 0..3 {
                rgb.index_axis_mut(Axis(0), ch).assign(&plane);
            }
            out = rgb;
        }
        for ch in 0..3 {
            let mean = F::from_f64_c(IMAGENET_MEAN[ch]);
            let std = F::from_f64_c(IMAGENET_STD[ch]);
            out.index_axis_mut(Axis(0), ch)
                .mapv_inplace(|v| (v - mean) / std);
        }
    }
    Ok(out)
}

/// Bilinear resize with half-pixel centre alignment.
pub(crate) fn resize_bilinear<F: Scalar>(image: &Array3<F>, oh: usize, ow: usize) -> Array3<F> {
    let (c, h, w) = image.dim();
    if (h, w) == (oh, ow) {
        return image.clone();
    }
    let mut out = Array3::zeros((c, oh, ow));
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = F::from_f64_c(fy - y0 as f64);
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = F::from_f64_c(fx - x0 as f64);
            for ci in 0..c {
                let p00 = image[[ci, y0, x0]];
                let p01 = image[[ci, y0, x1]];
                let p10 = image[[ci, y1, x0]];
                let p11 = image[[ci, y1, x1]];
                let top = p00 * (F::one() - wx) + p01 * wx;
                let bot = p10 * (F::one() - wx) + p11 * wx;
                out[[ci, oy, ox]] = top * (F::one() - wy) + bot * wy;
            }
        }
    }
    out
}

/// Carves a seeded validation fraction out of a pool; returns
/// `(remaining, validation)`. Benchmark reference sampling uses the
/// remaining portion; the validation portion exists for hyperparameter
/// tuning only.
pub fn split_validation<F: Scalar>(
    pool: &LabeledImageSet<F>,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledImageSet<F>, LabeledImageSet<F>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "validation fraction {fraction} outside [0, 1)"
        )));
    }
    let n = pool.len();
    let take = (n as f64 * fraction).round() as usize;
    let mut rng = seeded(seed, STREAM_SPLIT);
    let mut val_idx: Vec<usize> = index_sample(&mut rng, n, take).into_vec();
    val_idx.sort_unstable();
    let val_set: BTreeSet<usize> = val_idx.iter().copied().collect();
    let rest_idx: Vec<usize> = (0..n).filter(|i| !val_set.contains(i)).collect();
    Ok((pool.subset(&rest_idx), pool.subset(&val_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_set(n: usize, classes: u32) -> LabeledImageSet<f32> {
        let images = (0..n)
            .map(|i| {
                let mut img = Array3::zeros((1, 4, 4));
                img.fill(i as f32 / n as f32);
                img
            })
            .collect();
        let labels = (0..n).map(|i| i as u32 % classes).collect();
        LabeledImageSet::new(images, labels, Split::Train, DatasetId::Mnist).unwrap()
    }

    #[test]
    fn normal_split_purity_and_labels() {
        let train = toy_set(40, 4);
        let mut test = toy_set(20, 4);
        test.split = Split::Test;
        let (pool, test_set) = make_normal_split(&train, &test, 2).unwrap();
        assert!(pool.labels().iter().all(|&l| l == 2));
        assert_eq!(pool.len(), 10);
        for (i, &anom) in test_set.is_anomaly.iter().enumerate() {
            assert_eq!(anom, test.labels()[i] != 2);
        }
    }

    #[test]
    fn absent_class_is_a_config_error() {
        let train = toy_set(10, 2);
        let test = toy_set(10, 2);
        assert!(make_normal_split(&train, &test, 9).is_err());
    }

    #[test]
    fn single_class_test_split_is_degenerate() {
        let train = toy_set(10, 1);
        let test = toy_set(10, 1);
        // all test labels == 0 == normal class -> no anomalies
        assert!(make_normal_split(&train, &test, 0).is_err());
    }

    #[test]
    fn reference_sampling_is_deterministic_and_distinct() {
        let pool = toy_set(50, 1);
        let a = sample_reference_set(&pool, 0, 30, 7).unwrap();
        let b = sample_reference_set(&pool, 0, 30, 7).unwrap();
        assert_eq!(a.source_indices, b.source_indices);
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x, y);
        }
        let c = sample_reference_set(&pool, 0, 30, 8).unwrap();
        assert_ne!(a.source_indices, c.source_indices);
        let distinct: BTreeSet<_> = a.source_indices.iter().collect();
        assert_eq!(distinct.len(), 30);
        assert_eq!(a.anchor_index, 0);
    }

    #[test]
    fn reference_sampling_bounds() {
        let pool = toy_set(10, 1);
        assert!(sample_reference_set(&pool, 0, 30, 1).is_err());
        assert!(sample_reference_set(&pool, 0, 1, 1).is_err());
        assert!(sample_reference_set(&pool, 0, 2, 1).is_ok());
    }

    #[test]
    fn contamination_counts_and_anchor_safety() {
        let pool = toy_set(60, 1);
        let anomalies = toy_set(25, 1);
        let rs = sample_reference_set(&pool, 0, 30, 3).unwrap();

        let c20 = contaminate(&rs, &anomalies, 0.2, 11).unwrap();
        assert_eq!(c20.contaminated_indices.len(), 6); // ceil(0.2*30)
        assert!(!c20.contaminated_indices.contains(&rs.anchor_index));

        let c0 = contaminate(&rs, &anomalies, 0.0, 11).unwrap();
        assert!(c0.contaminated_indices.is_empty());
        for (a, b) in c0.samples.iter().zip(&rs.samples) {
            assert_eq!(a, b);
        }

        let rs60 = sample_reference_set(&pool, 0, 60, 3).unwrap();
        let c5 = contaminate(&rs60, &anomalies, 0.05, 11).unwrap();
        assert_eq!(c5.contaminated_indices.len(), 3); // ceil(0.05*60)

        assert!(contaminate(&rs, &anomalies, 0.5, 1).is_err());
        assert!(contaminate(&rs, &anomalies, -0.1, 1).is_err());
    }

    #[test]
    fn preprocess_shapes() {
        let mnist_img = Array3::<f32>::zeros((1, 28, 28));
        let out = preprocess(&mnist_img, DatasetId::Mnist, false).unwrap();
        assert_eq!(out.dim(), (1, 28, 28));
        assert!(out.iter().all(|&v| v == 0.0), "all-zero stays all-zero");

        let big = Array3::<f32>::ones((3, 512, 256));
        let out = preprocess(&big, DatasetId::Mvtec, false).unwrap();
        assert_eq!(out.dim(), (3, 128, 128));
        // constant image resizes to the same constant
        for &v in out.iter() {
            assert!((v - 1.0).abs() < 1e-6);
        }

        let wrong = Array3::<f32>::zeros((1, 32, 32));
        assert!(preprocess(&wrong, DatasetId::Mnist, false).is_err());
    }

    #[test]
    fn preprocess_pretrained_normalizes_and_replicates() {
        let img = Array3::<f32>::from_elem((1, 28, 28), 0.485);
        let out = preprocess(&img, DatasetId::Mnist, true).unwrap();
        assert_eq!(out.dim(), (3, 28, 28));
        // channel 0 mean is exactly the fill value -> normalises to 0
        assert!(out[[0, 0, 0]].abs() < 1e-6);
    }

    #[test]
    fn resize_bilinear_hand_case() {
        // 1x2x2 -> 1x1x1 picks the average of all four pixels
        let mut img = Array3::<f64>::zeros((1, 2, 2));
        img[[0, 0, 0]] = 1.0;
        img[[0, 0, 1]] = 2.0;
        img[[0, 1, 0]] = 3.0;
        img[[0, 1, 1]] = 4.0;
        let out = resize_bilinear(&img, 1, 1);
        assert!((out[[0, 0, 0]] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn validation_split_is_disjoint_and_seeded() {
        let pool = toy_set(50, 1);
        let (rest, val) = split_validation(&pool, 0.2, 99).unwrap();
        assert_eq!(val.len(), 10);
        assert_eq!(rest.len(), 40);
        let (rest2, val2) = split_validation(&pool, 0.2, 99).unwrap();
        assert_eq!(rest.len(), rest2.len());
        for (a, b) in val.images().iter().zip(val2.images()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn test_subsample_preserves_prevalence() {
        let samples: Vec<Array3<f32>> = (0..100).map(|_| Array3::zeros((1, 2, 2))).collect();
        let is_anomaly: Vec<bool> = (0..100).map(|i| i >= 10).collect(); // 90% anomalies
        let ts = TestSet {
            samples,
            is_anomaly,
            source_indices: (0..100).collect(),
        };
        let sub = ts.subsample(20, 1);
        assert_eq!(sub.len(), 20);
        let anoms = sub.is_anomaly.iter().filter(|&&a| a).count();
        assert_eq!(anoms, 18);
        let again = ts.subsample(20, 1);
        assert_eq!(sub.source_indices, again.source_indices);
    }

    proptest! {
        #[test]
        fn contamination_count_is_ceil_rate_n(n in 2usize..40, rate in 0.0f64..0.49) {
            let pool = toy_set(80, 1);
            let anomalies = toy_set(50, 1);
            let rs = sample_reference_set(&pool, 0, n, 5).unwrap();
            prop_assume!((rate * n as f64).ceil() as usize <= n - 1);
            let c = contaminate(&rs, &anomalies, rate, 17).unwrap();
            prop_assert_eq!(c.contaminated_indices.len(), (rate * n as f64).ceil() as usize);
            prop_assert!(!c.contaminated_indices.contains(&rs.anchor_index));
        }
    }
}
