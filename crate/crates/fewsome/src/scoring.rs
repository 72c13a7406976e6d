//! Anomaly scoring and evaluation metrics.
//!
//! A test sample's score is its normalised distance to the nearest
//! Reference embedding plus `alpha` times its distance to the frozen
//! anchor. Metrics: ROC AUC (anomaly = positive, ties at half weight), and
//! F1 / balanced accuracy under the fixed-percentile threshold rule.

use crate::datasets::TestSet;
use crate::model::{normalized_distance_slices, Embedding};
use crate::trainer::TrainedModel;
use crate::{Error, Result, Scalar};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Per-sample scores paired with ground truth and run provenance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoredTestSet {
    pub scores: Vec<f64>,
    pub is_anomaly: Vec<bool>,
    pub normal_class: u32,
    pub meta: RunMeta,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub n: usize,
    pub config_hash: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// Threshold metrics with the confusion counts they derive from.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub f1: f64,
    pub balanced_accuracy: f64,
    pub threshold: f64,
    pub counts: ConfusionCounts,
}

/// Scores one embedded test sample against the Reference embeddings and
/// anchor: `min_r ||f(t) - f(r)|| / sqrt(l) + alpha * ||f(t) - anchor|| / sqrt(l)`.
/// The anchor term is constant under the min, so this equals the
/// nearest-reference distance plus the weighted anchor distance.
pub fn score_embedding<F: Scalar>(
    test_embedding: &Embedding<F>,
    reference_embeddings: &[Embedding<F>],
    anchor: &Embedding<F>,
    alpha: f64,
) -> Result<f64> {
    if reference_embeddings.is_empty() {
        return Err(Error::EmptyInput(
            "model holds no reference embeddings".into(),
        ));
    }
    let l = test_embedding.len();
    if anchor.len() != l || reference_embeddings.iter().any(|e| e.len() != l) {
        return Err(Error::ShapeMismatch(
            "embedding lengths disagree in scoring".into(),
        ));
    }
    let mut nearest = f64::INFINITY;
    for r in reference_embeddings {
        let d = normalized_distance_slices(test_embedding.as_slice(), r.as_slice()).to_f64_c();
        if d < nearest {
            nearest = d;
        }
    }
    let anchor_d = normalized_distance_slices(test_embedding.as_slice(), anchor.as_slice());
    Ok(nearest + alpha * anchor_d.to_f64_c())
}

/// Scores a single test image with a trained model.
pub fn score<F: Scalar>(model: &TrainedModel<F>, image: &ndarray::Array3<F>) -> Result<f64> {
    let e = model.network.embed_one(image)?;
    score_embedding(
        &e,
        &model.reference_embeddings,
        &model.anchor,
        model.config.alpha,
    )
}

/// Scores every sample of a test set, order preserved; embedding runs
/// batched in inference mode.
pub fn score_all<F: Scalar>(model: &TrainedModel<F>, test_set: &TestSet<F>) -> Result<ScoredTestSet> {
    if test_set.is_empty() {
        return Err(Error::EmptyInput("empty test set".into()));
    }
    let embeddings = model.network.embed(&test_set.samples)?;
    let scores = embeddings
        .iter()
        .map(|e| {
            score_embedding(
                e,
                &model.reference_embeddings,
                &model.anchor,
                model.config.alpha,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoredTestSet {
        scores,
        is_anomaly: test_set.is_anomaly.clone(),
        normal_class: 0,
        meta: RunMeta {
            seed: model.config.seed,
            n: model.config.n,
            config_hash: String::new(),
        },
    })
}

/// ROC AUC with anomalies as the positive class; tied scores contribute
/// half a concordant pair (rank / Mann-Whitney convention, exact under
/// ties).
pub fn auc(scored: &ScoredTestSet) -> Result<f64> {
    auc_from(&scored.scores, &scored.is_anomaly)
}

/// AUC over raw score/label slices.
pub fn auc_from(scores: &[f64], is_anomaly: &[bool]) -> Result<f64> {
    if scores.len() != is_anomaly.len() {
        return Err(Error::ShapeMismatch(
            "scores and labels differ in length".into(),
        ));
    }
    let pos = is_anomaly.iter().filter(|&&a| a).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Config(
            "AUC needs at least one anomaly and one normal sample".into(),
        ));
    }
    if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Config(format!("non-finite score {bad}")));
    }

    // average ranks with tie correction
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block [i, j] shares the mean rank
        let mean_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if is_anomaly[idx] {
                rank_sum_pos += mean_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Linear-interpolation percentile of a sample (the common default
/// definition: index `h = (n-1) * p/100` interpolated between neighbours).
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("percentile of empty slice".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Classifies scores at or above the `percentile`-th percentile of the
/// test-score distribution as anomalies, then reports F1 (anomaly =
/// positive) and balanced accuracy alongside AUC.
///
/// The percentile threshold reflects the benchmark convention that 90% of
/// the test data are anomalies; it is an evaluation rule, not a tuned
/// parameter.
pub fn threshold_metrics(scored: &ScoredTestSet, percentile_value: f64) -> Result<MetricsReport> {
    if scored.scores.is_empty() {
        return Err(Error::EmptyInput("empty scored set".into()));
    }
    let threshold = percentile(&scored.scores, percentile_value)?;
    let mut counts = ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&s, &anom) in scored.scores.iter().zip(&scored.is_anomaly) {
        let predicted = s >= threshold;
        match (predicted, anom) {
            (true, true) => counts.tp += 1,
            (true, false) => counts.fp += 1,
            (false, false) => counts.tn += 1,
            (false, true) => counts.fn_ += 1,
        }
    }
    let auc = auc(scored)?;
    Ok(MetricsReport {
        auc,
        f1: f1_from_counts(&counts),
        balanced_accuracy: balanced_accuracy_from_counts(&counts),
        threshold,
        counts,
    })
}

pub fn f1_from_counts(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * c.tp as f64 / denom as f64
    }
}

pub fn balanced_accuracy_from_counts(c: &ConfusionCounts) -> f64 {
    let tpr = if c.tp + c.fn_ == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    let tnr = if c.tn + c.fp == 0 {
        0.0
    } else {
        c.tn as f64 / (c.tn + c.fp) as f64
    };
    (tpr + tnr) / 2.0
}

/// Writes one record per sample as columnar text with a header row.
pub fn export_scored(scored: &ScoredTestSet, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "sample_id,score,is_anomaly").map_err(|e| Error::io(path, e))?;
    for (i, (&s, &a)) in scored.scores.iter().zip(&scored.is_anomaly).enumerate() {
        writeln!(file, "{i},{s},{}", a as u8).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
