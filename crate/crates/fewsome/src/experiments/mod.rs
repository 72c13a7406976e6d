//! Study orchestration: benchmark runs, size sweeps, contamination sweeps,
//! the stop-term ablation, and the Reference-Set sensitivity analysis.
//!
//! Runs are independent (class, seed, sweep-point) jobs executed by a small
//! worker pool. Every run appends a [`RunRecord`] to the record file; run
//! seeds derive from (dataset, class, repetition, study) so results do not
//! depend on worker scheduling.

pub mod plots;
pub mod records;

pub use plots::emit_plots;
pub use records::{
    aggregate, config_hash, load_records, persist_results, write_aggregate, AggregateRow,
    AggregateTable, GroupBy, RunRecord, Variant, RECORD_SCHEMA_VERSION,
};

use crate::datasets::{
    contaminate, list_categories, load_dataset, load_mvtec_category_sets, make_normal_split,
    preprocess, sample_reference_set, split_validation, DatasetId, LabeledImageSet, TestSet,
};
use crate::model::InitMode;
use crate::scoring::{score_all, threshold_metrics};
use crate::trainer::{train, TrainConfig};
use crate::{Error, Result, Scalar};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

/// Study-level protocol parameters shared across runs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyParams {
    /// Fraction of the per-class training pool carved off for
    /// hyperparameter tuning; benchmark Reference Sets are drawn from the
    /// remainder.
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    /// Seed of the validation carve (fixed protocol constant, not per-run).
    #[serde(default = "default_validation_seed")]
    pub validation_seed: u64,
    /// Percentile of the score distribution used as the anomaly threshold.
    #[serde(default = "default_percentile")]
    pub percentile: f64,
    /// Cap on evaluated test samples (class-proportional, seeded);
    /// absent = full official test split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_subsample: Option<usize>,
    /// Cap on the contamination anomaly pool kept in memory per class.
    #[serde(default = "default_anomaly_pool_cap")]
    pub anomaly_pool_cap: usize,
}

fn default_validation_fraction() -> f64 {
    0.2
}
fn default_validation_seed() -> u64 {
    20_230
}
fn default_percentile() -> f64 {
    10.0
}
fn default_anomaly_pool_cap() -> usize {
    2048
}

impl Default for StudyParams {
    fn default() -> Self {
        Self {
            validation_fraction: default_validation_fraction(),
            validation_seed: default_validation_seed(),
            percentile: default_percentile(),
            eval_subsample: None,
            anomaly_pool_cap: default_anomaly_pool_cap(),
        }
    }
}

/// Per-dataset training defaults plus study parameters; mirrors the
/// committed `configs/defaults.toml`. Unknown keys are a hard error.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema_version: u32,
    /// Keyed by dataset name (`mnist`, `fmnist`, `cifar10`, `mvtec`).
    pub datasets: BTreeMap<String, TrainConfig>,
    #[serde(default)]
    pub study: StudyParams,
}

impl ConfigFile {
    /// The defaults committed with the repository. The MNIST-family values
    /// were tuned once on the 20% validation split and frozen; see
    /// `configs/defaults.toml` for the provenance notes.
    pub fn builtin() -> Self {
        toml::from_str(BUILTIN_DEFAULTS).expect("builtin defaults parse")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed: ConfigFile = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if parsed.schema_version != 1 {
            return Err(Error::Config(format!(
                "unsupported config schema_version {}",
                parsed.schema_version
            )));
        }
        Ok(parsed)
    }

    pub fn defaults_for(&self, dataset: DatasetId) -> Result<TrainConfig> {
        self.datasets
            .get(dataset.dir_name())
            .cloned()
            .ok_or_else(|| {
                Error::Config(format!(
                    "no defaults for dataset '{dataset}' in the config file"
                ))
            })
    }
}

pub(crate) const BUILTIN_DEFAULTS: &str = include_str!("builtin_defaults.toml");

/// Everything a study needs besides its own parameters.
#[derive(Clone, Debug)]
pub struct ExperimentContext {
    pub data_root: PathBuf,
    pub records_path: PathBuf,
    pub workers: usize,
    pub config: ConfigFile,
    /// Save a checkpoint per trained run into this directory.
    pub checkpoint_dir: Option<PathBuf>,
    /// Evaluate on the validation carve instead of the official test split
    /// (hyperparameter tuning protocol only).
    pub eval_on_validation: bool,
}

impl ExperimentContext {
    pub fn new(data_root: impl Into<PathBuf>, records_path: impl Into<PathBuf>) -> Self {
        Self {
            data_root: data_root.into(),
            records_path: records_path.into(),
            workers: 1,
            config: ConfigFile::builtin(),
            checkpoint_dir: None,
            eval_on_validation: false,
        }
    }
}

/// Immutable per-class data shared by that class's runs.
struct ClassBundle<F: Scalar> {
    dataset_id: DatasetId,
    normal_class: u32,
    class_name: Option<String>,
    /// Preprocessed sampling pool (official training images of the class,
    /// minus the validation carve).
    pool: LabeledImageSet<F>,
    /// Preprocessed evaluation set.
    test: TestSet<F>,
    /// Preprocessed non-normal training images for contamination.
    anomaly_pool: Option<LabeledImageSet<F>>,
}

/// One training job.
#[derive(Clone, Debug)]
struct RunSpec {
    study: String,
    variant: Variant,
    sweep_value: Option<f64>,
    contamination_rate: f64,
    config: TrainConfig,
    keep_trace: bool,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic run seed from structured coordinates; independent of
/// worker scheduling and execution order.
fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x51_7C_C1_B7_27_22_0A_95u64;
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

fn dataset_salt(id: DatasetId) -> u64 {
    match id {
        DatasetId::Mnist => 1,
        DatasetId::Fmnist => 2,
        DatasetId::Cifar10 => 3,
        DatasetId::Mvtec => 4,
    }
}

fn preprocess_set<F: Scalar>(
    set: &LabeledImageSet<F>,
    pretrained: bool,
) -> Result<LabeledImageSet<F>> {
    let id = set.dataset_id;
    let images = set
        .images()
        .iter()
        .map(|img| preprocess(img, id, pretrained))
        .collect::<Result<Vec<_>>>()?;
    let mut out = LabeledImageSet::new(images, set.labels().to_vec(), set.split, id)?;
    out.label_names = set.label_names.clone();
    Ok(out)
}

fn preprocess_test<F: Scalar>(
    test: &TestSet<F>,
    id: DatasetId,
    pretrained: bool,
) -> Result<TestSet<F>> {
    Ok(TestSet {
        samples: test
            .samples
            .iter()
            .map(|img| preprocess(img, id, pretrained))
            .collect::<Result<Vec<_>>>()?,
        is_anomaly: test.is_anomaly.clone(),
        source_indices: test.source_indices.clone(),
    })
}

/// Builds the per-class data bundles for a dataset.
fn build_bundles<F: Scalar>(
    ctx: &ExperimentContext,
    dataset: DatasetId,
    init_mode: InitMode,
    classes: Option<&[u32]>,
    need_anomaly_pool: bool,
) -> Result<Vec<Arc<ClassBundle<F>>>> {
    let params = &ctx.config.study;
    let pretrained = init_mode == InitMode::Pretrained;

    if dataset == DatasetId::Mvtec {
        if need_anomaly_pool {
            return Err(Error::Config(
                "mvtec has no anomalous training images to contaminate with".into(),
            ));
        }
        let categories = list_categories(&ctx.data_root.join(dataset.dir_name()))
            .or_else(|_| list_categories(&ctx.data_root))?;
        let mut bundles = Vec::new();
        for (idx, category) in categories.iter().enumerate() {
            if let Some(filter) = classes {
                if !filter.contains(&(idx as u32)) {
                    continue;
                }
            }
            let (train_set, test_set) = load_mvtec_category_sets::<F>(&ctx.data_root, category)?;
            let (pool_all, test) = make_normal_split(&train_set, &test_set, 0)?;
            let (pool, _val) =
                split_validation(&pool_all, params.validation_fraction, params.validation_seed)?;
            let pool = preprocess_set(&pool, pretrained)?;
            let mut test = preprocess_test(&test, dataset, pretrained)?;
            if let Some(cap) = params.eval_subsample {
                test = test.subsample(cap, derive_seed(&[dataset_salt(dataset), idx as u64, 999]));
            }
            bundles.push(Arc::new(ClassBundle {
                dataset_id: dataset,
                normal_class: idx as u32,
                class_name: Some(category.clone()),
                pool,
                test,
                anomaly_pool: None,
            }));
        }
        if bundles.is_empty() {
            return Err(Error::Config("no mvtec categories selected".into()));
        }
        return Ok(bundles);
    }

    let (train_set, test_set) = load_dataset::<F>(dataset, &ctx.data_root)?;
    let all_classes = train_set.classes();
    let selected: Vec<u32> = match classes {
        Some(filter) => {
            for c in filter {
                if !all_classes.contains(c) {
                    return Err(Error::Config(format!("class {c} not in {dataset}")));
                }
            }
            filter.to_vec()
        }
        None => all_classes.clone(),
    };

    // per-class validation carves (also used for validation-mode evaluation)
    let mut carves: BTreeMap<u32, (LabeledImageSet<F>, LabeledImageSet<F>)> = BTreeMap::new();
    for &c in &all_classes {
        let (pool_all, _) = make_normal_split(&train_set, &test_set, c)?;
        carves.insert(
            c,
            split_validation(&pool_all, params.validation_fraction, params.validation_seed)?,
        );
    }

    let mut bundles = Vec::new();
    for &c in &selected {
        let (pool, _) = carves.get(&c).expect("carved above").clone();
        let pool = preprocess_set(&pool, pretrained)?;

        let mut test = if ctx.eval_on_validation {
            // tuning protocol: normals = this class's validation carve,
            // anomalies = the other classes' validation carves
            let mut samples = Vec::new();
            let mut is_anomaly = Vec::new();
            for (&cc, (_, val)) in &carves {
                for img in val.images() {
                    samples.push(img.clone());
                    is_anomaly.push(cc != c);
                }
            }
            TestSet {
                source_indices: (0..samples.len()).collect(),
                samples,
                is_anomaly,
            }
        } else {
            let (_, test) = make_normal_split(&train_set, &test_set, c)?;
            test
        };
        test = preprocess_test(&test, dataset, pretrained)?;
        if let Some(cap) = params.eval_subsample {
            test = test.subsample(cap, derive_seed(&[dataset_salt(dataset), c as u64, 999]));
        }

        let anomaly_pool = if need_anomaly_pool {
            let indices: Vec<usize> = (0..train_set.len())
                .filter(|&i| train_set.labels()[i] != c)
                .collect();
            let cap = params.anomaly_pool_cap.min(indices.len());
            // seeded cap keeps memory bounded; the draw inside contaminate
            // stays uniform over this pool
            let mut rng = crate::rngutil::seeded(
                derive_seed(&[dataset_salt(dataset), c as u64, 777]),
                crate::rngutil::STREAM_SAMPLING,
            );
            let chosen: Vec<usize> = rand::seq::index::sample(&mut rng, indices.len(), cap)
                .into_iter()
                .map(|i| indices[i])
                .collect();
            let images: Vec<_> = chosen
                .iter()
                .map(|&i| preprocess(train_set.image(i), dataset, pretrained))
                .collect::<Result<_>>()?;
            let labels: Vec<u32> = chosen.iter().map(|&i| train_set.labels()[i]).collect();
            Some(LabeledImageSet::new(
                images,
                labels,
                crate::datasets::Split::Train,
                dataset,
            )?)
        } else {
            None
        };

        bundles.push(Arc::new(ClassBundle {
            dataset_id: dataset,
            normal_class: c,
            class_name: None,
            pool,
            test,
            anomaly_pool,
        }));
    }
    Ok(bundles)
}

/// Trains and evaluates one run; failures become `failed` records instead
/// of aborting the sweep.
fn execute_run<F: Scalar>(
    bundle: &ClassBundle<F>,
    spec: &RunSpec,
    percentile: f64,
    checkpoint_dir: Option<&Path>,
) -> RunRecord {
    let config = spec.config.clone();
    let hash = config_hash(&config);
    let mut record = RunRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        study: spec.study.clone(),
        dataset_id: bundle.dataset_id,
        normal_class: bundle.normal_class,
        class_name: bundle.class_name.clone(),
        seed: config.seed,
        variant: spec.variant,
        sweep_value: spec.sweep_value,
        contamination_rate: spec.contamination_rate,
        config,
        config_hash: hash,
        auc: None,
        f1: None,
        balanced_accuracy: None,
        train_seconds: None,
        stopped_epoch: None,
        collapse_flag: None,
        failed: None,
        duplicate: false,
        trace_losses: None,
    };

    let outcome = (|| -> Result<()> {
        let mut reference = sample_reference_set(
            &bundle.pool,
            bundle.normal_class,
            record.config.n,
            record.config.seed,
        )?;
        if spec.contamination_rate > 0.0 {
            let pool = bundle.anomaly_pool.as_ref().ok_or_else(|| {
                Error::Config("contamination requested without an anomaly pool".into())
            })?;
            reference = contaminate(
                &reference,
                pool,
                spec.contamination_rate,
                record.config.seed,
            )?;
        }
        let (model, trace) = train(record.config.clone(), &reference)?;
        let mut scored = score_all(&model, &bundle.test)?;
        scored.normal_class = bundle.normal_class;
        scored.meta.config_hash = record.config_hash.clone();
        let metrics = threshold_metrics(&scored, percentile)?;

        record.auc = Some(metrics.auc);
        record.f1 = Some(metrics.f1);
        record.balanced_accuracy = Some(metrics.balanced_accuracy);
        record.train_seconds = Some(trace.epoch_seconds.iter().sum());
        record.stopped_epoch = Some(trace.stopped_epoch);
        record.collapse_flag = Some(trace.collapse_flag);
        if spec.keep_trace {
            record.trace_losses = Some(trace.epoch_losses.clone());
        }
        if let Some(dir) = checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let name = format!(
                "{}_{}_c{}_s{}.safetensors",
                spec.study, bundle.dataset_id, bundle.normal_class, record.seed
            );
            crate::model::save_checkpoint(
                &dir.join(name),
                &model.network,
                &model.anchor,
                &model.reference_embeddings,
                &record.config.to_canonical_json(),
                Some(bundle.dataset_id.dir_name()),
            )?;
        }
        Ok(())
    })();

    if let Err(e) = outcome {
        log::warn!(
            "run failed ({} class {} seed {}): {e}",
            record.dataset_id,
            record.normal_class,
            record.seed
        );
        record.failed = Some(e.to_string());
    }
    record
}

/// Executes the job list on `workers` threads; output order is normalised
/// afterwards, and run content never depends on scheduling.
fn run_pool<F: Scalar>(
    jobs: Vec<(Arc<ClassBundle<F>>, RunSpec)>,
    workers: usize,
    percentile: f64,
    checkpoint_dir: Option<&Path>,
) -> Vec<RunRecord> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<RunRecord>> = Mutex::new(Vec::with_capacity(jobs.len()));
    let workers = workers.max(1).min(jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let (bundle, spec) = &jobs[i];
                let record = execute_run(bundle, spec, percentile, checkpoint_dir);
                results.lock().expect("collector lock").push(record);
            });
        }
    });
    let mut records = results.into_inner().expect("collector lock");
    records.sort_by(|a, b| {
        (
            a.normal_class,
            a.seed,
            a.sweep_value.unwrap_or(-1.0).to_bits(),
        )
            .cmp(&(
                b.normal_class,
                b.seed,
                b.sweep_value.unwrap_or(-1.0).to_bits(),
            ))
    });
    records
}

fn clamp_for_n(config: &mut TrainConfig, n: usize) {
    config.n = n;
    if config.k > n - 1 {
        config.k = n - 1;
    }
}

fn finish(
    ctx: &ExperimentContext,
    study: &str,
    mut records: Vec<RunRecord>,
    group_by: GroupBy,
) -> Result<AggregateTable> {
    persist_results(&mut records, &ctx.records_path)?;
    Ok(aggregate(study, &records, group_by))
}

/// Trains `seeds_per_class` models per normal class on fresh Reference
/// Sets and reports class-and-seed-averaged metrics over the official test
/// split.
pub fn run_benchmark<F: Scalar>(
    ctx: &ExperimentContext,
    dataset: DatasetId,
    variant: Variant,
    seeds_per_class: usize,
    classes: Option<&[u32]>,
) -> Result<AggregateTable> {
    records::ensure_appendable(&ctx.records_path)?;
    let base = ctx.config.defaults_for(dataset)?;
    let bundles = build_bundles::<F>(ctx, dataset, base.init_mode, classes, false)?;
    let mut jobs = Vec::new();
    for bundle in &bundles {
        for rep in 0..seeds_per_class {
            let mut config = base.clone();
            config.smart = variant == Variant::Smart;
            config.seed = derive_seed(&[
                dataset_salt(dataset),
                bundle.normal_class as u64,
                rep as u64,
                1,
            ]);
            jobs.push((
                bundle.clone(),
                RunSpec {
                    study: "benchmark".into(),
                    variant,
                    sweep_value: None,
                    contamination_rate: 0.0,
                    config,
                    keep_trace: false,
                },
            ));
        }
    }
    let records = run_pool(
        jobs,
        ctx.workers,
        ctx.config.study.percentile,
        ctx.checkpoint_dir.as_deref(),
    );
    finish(ctx, "benchmark", records, GroupBy::Dataset)
}

/// Benchmarks at each Reference Set size, recording training time per size
/// alongside the usual metrics.
pub fn run_size_sweep<F: Scalar>(
    ctx: &ExperimentContext,
    dataset: DatasetId,
    sizes: &[usize],
    seeds_per_class: usize,
    variant: Variant,
) -> Result<AggregateTable> {
    records::ensure_appendable(&ctx.records_path)?;
    let base = ctx.config.defaults_for(dataset)?;
    let bundles = build_bundles::<F>(ctx, dataset, base.init_mode, None, false)?;
    let mut jobs = Vec::new();
    for &n in sizes {
        for bundle in &bundles {
            for rep in 0..seeds_per_class {
                let mut config = base.clone();
                config.smart = variant == Variant::Smart;
                clamp_for_n(&mut config, n);
                config.seed = derive_seed(&[
                    dataset_salt(dataset),
                    bundle.normal_class as u64,
                    rep as u64,
                    2,
                    n as u64,
                ]);
                jobs.push((
                    bundle.clone(),
                    RunSpec {
                        study: "size_sweep".into(),
                        variant,
                        sweep_value: Some(n as f64),
                        contamination_rate: 0.0,
                        config,
                        keep_trace: false,
                    },
                ));
            }
        }
    }
    let records = run_pool(
        jobs,
        ctx.workers,
        ctx.config.study.percentile,
        ctx.checkpoint_dir.as_deref(),
    );
    finish(ctx, "size_sweep", records, GroupBy::SweepValue)
}

/// Benchmarks with the Reference Set contaminated by training anomalies at
/// each rate before training.
pub fn run_contamination_sweep<F: Scalar>(
    ctx: &ExperimentContext,
    dataset: DatasetId,
    rates: &[f64],
    seeds_per_class: usize,
) -> Result<AggregateTable> {
    records::ensure_appendable(&ctx.records_path)?;
    let base = ctx.config.defaults_for(dataset)?;
    let bundles = build_bundles::<F>(ctx, dataset, base.init_mode, None, true)?;
    let mut jobs = Vec::new();
    for &rate in rates {
        if !(0.0..0.5).contains(&rate) {
            return Err(Error::Config(format!(
                "contamination rate {rate} outside [0, 0.5)"
            )));
        }
        for bundle in &bundles {
            for rep in 0..seeds_per_class {
                let mut config = base.clone();
                config.seed = derive_seed(&[
                    dataset_salt(dataset),
                    bundle.normal_class as u64,
                    rep as u64,
                    3,
                ]);
                jobs.push((
                    bundle.clone(),
                    RunSpec {
                        study: "contamination".into(),
                        variant: Variant::Fewsome,
                        sweep_value: Some(rate),
                        contamination_rate: rate,
                        config,
                        keep_trace: false,
                    },
                ));
            }
        }
    }
    let records = run_pool(
        jobs,
        ctx.workers,
        ctx.config.study.percentile,
        ctx.checkpoint_dir.as_deref(),
    );
    finish(ctx, "contamination", records, GroupBy::SweepValue)
}

/// Paired runs with the configured stop-term weight versus `alpha = 0`,
/// identical seeds and Reference Sets, loss traces retained for the
/// collapse plots.
pub fn run_ablation<F: Scalar>(
    ctx: &ExperimentContext,
    dataset: DatasetId,
    seeds_per_class: usize,
    classes: Option<&[u32]>,
) -> Result<AggregateTable> {
    records::ensure_appendable(&ctx.records_path)?;
    let base = ctx.config.defaults_for(dataset)?;
    if base.alpha == 0.0 {
        return Err(Error::Config(
            "ablation needs a non-zero configured alpha to compare against".into(),
        ));
    }
    let bundles = build_bundles::<F>(ctx, dataset, base.init_mode, classes, false)?;
    let mut jobs = Vec::new();
    for bundle in &bundles {
        for rep in 0..seeds_per_class {
            let seed = derive_seed(&[
                dataset_salt(dataset),
                bundle.normal_class as u64,
                rep as u64,
                4,
            ]);
            for alpha in [base.alpha, 0.0] {
                let mut config = base.clone();
                config.alpha = alpha;
                config.seed = seed;
                jobs.push((
                    bundle.clone(),
                    RunSpec {
                        study: "ablation".into(),
                        variant: Variant::Fewsome,
                        sweep_value: Some(alpha),
                        contamination_rate: 0.0,
                        config,
                        keep_trace: true,
                    },
                ));
            }
        }
    }
    let records = run_pool(
        jobs,
        ctx.workers,
        ctx.config.study.percentile,
        ctx.checkpoint_dir.as_deref(),
    );
    finish(ctx, "ablation", records, GroupBy::ClassAndSweep)
}

/// Trains on `reference_resamples` different Reference Sets per size for
/// one normal class, reporting the spread of AUC per size.
pub fn run_sensitivity<F: Scalar>(
    ctx: &ExperimentContext,
    dataset: DatasetId,
    normal_class: u32,
    sizes: &[usize],
    reference_resamples: usize,
) -> Result<AggregateTable> {
    records::ensure_appendable(&ctx.records_path)?;
    let base = ctx.config.defaults_for(dataset)?;
    let bundles = build_bundles::<F>(ctx, dataset, base.init_mode, Some(&[normal_class]), false)?;
    let bundle = bundles.into_iter().next().expect("one class requested");
    let mut jobs = Vec::new();
    for &n in sizes {
        for rep in 0..reference_resamples {
            let mut config = base.clone();
            clamp_for_n(&mut config, n);
            config.seed = derive_seed(&[
                dataset_salt(dataset),
                normal_class as u64,
                rep as u64,
                5,
                n as u64,
            ]);
            jobs.push((
                bundle.clone(),
                RunSpec {
                    study: "sensitivity".into(),
                    variant: Variant::Fewsome,
                    sweep_value: Some(n as f64),
                    contamination_rate: 0.0,
                    config,
                    keep_trace: false,
                },
            ));
        }
    }
    let records = run_pool(
        jobs,
        ctx.workers,
        ctx.config.study.percentile,
        ctx.checkpoint_dir.as_deref(),
    );
    finish(ctx, "sensitivity", records, GroupBy::SweepValue)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::DatasetId;
    use std::path::Path;

    fn synthetic_mnist_root(n_train: usize, n_test: usize) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let mnist = dir.path().join("mnist");
        std::fs::create_dir_all(&mnist).unwrap();
        crate::datasets::idx_fixtures::write_idx_pair(&mnist, "train", n_train, 28, 28, 3);
        crate::datasets::idx_fixtures::write_idx_pair(&mnist, "t10k", n_test, 28, 28, 3);
        dir
    }

    fn fast_ctx(root: &Path, records: &Path) -> ExperimentContext {
        let mut ctx = ExperimentContext::new(root, records);
        let mnist = ctx.config.datasets.get_mut("mnist").unwrap();
        mnist.n = 3;
        mnist.k = 1;
        mnist.batch_size = 3;
        mnist.max_epochs = 2;
        mnist.learning_rate = 1e-3;
        ctx.config.study.eval_subsample = Some(24);
        ctx
    }

    #[test]
    fn benchmark_on_synthetic_data_produces_records() {
        let data = synthetic_mnist_root(60, 30);
        let out = tempfile::tempdir().unwrap();
        let records_path = out.path().join("records.jsonl");
        let ctx = fast_ctx(data.path(), &records_path);

        let table =
            run_benchmark::<f32>(&ctx, DatasetId::Mnist, Variant::Fewsome, 2, Some(&[0, 1]))
                .unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rows[0].count, 4); // 2 classes x 2 seeds
        let persisted = load_records(&records_path).unwrap();
        assert_eq!(persisted.len(), 4);
        assert!(persisted.iter().all(|r| r.succeeded()));
    }

    #[test]
    fn seed_hygiene_serial_vs_concurrent() {
        let data = synthetic_mnist_root(60, 30);
        let out = tempfile::tempdir().unwrap();

        let mut serial_ctx = fast_ctx(data.path(), &out.path().join("serial.jsonl"));
        serial_ctx.workers = 1;
        run_benchmark::<f32>(
            &serial_ctx,
            DatasetId::Mnist,
            Variant::Fewsome,
            2,
            Some(&[0, 1]),
        )
        .unwrap();

        let mut par_ctx = fast_ctx(data.path(), &out.path().join("par.jsonl"));
        par_ctx.workers = 4;
        run_benchmark::<f32>(
            &par_ctx,
            DatasetId::Mnist,
            Variant::Fewsome,
            2,
            Some(&[0, 1]),
        )
        .unwrap();

        let mut serial = load_records(&out.path().join("serial.jsonl")).unwrap();
        let mut par = load_records(&out.path().join("par.jsonl")).unwrap();
        let key = |r: &RunRecord| (r.normal_class, r.seed);
        serial.sort_by_key(key);
        par.sort_by_key(key);
        assert_eq!(serial.len(), par.len());
        for (a, b) in serial.iter().zip(&par) {
            assert_eq!(a.seed, b.seed);
            assert_eq!(a.auc, b.auc, "metrics must not depend on scheduling");
            assert_eq!(a.f1, b.f1);
        }
    }

    #[test]
    fn contamination_zero_equals_benchmark_run() {
        let data = synthetic_mnist_root(90, 30);
        let out = tempfile::tempdir().unwrap();
        let ctx = fast_ctx(data.path(), &out.path().join("r.jsonl"));
        let table = run_contamination_sweep::<f32>(&ctx, DatasetId::Mnist, &[0.0, 0.4], 1).unwrap();
        assert_eq!(table.rows.len(), 2);
        let records = load_records(&out.path().join("r.jsonl")).unwrap();
        assert!(records.iter().all(|r| r.succeeded()));
        assert!(records
            .iter()
            .filter(|r| r.contamination_rate == 0.0)
            .all(|r| r.sweep_value == Some(0.0)));
    }

    #[test]
    fn ablation_pairs_share_seeds() {
        let data = synthetic_mnist_root(60, 30);
        let out = tempfile::tempdir().unwrap();
        let ctx = fast_ctx(data.path(), &out.path().join("r.jsonl"));
        run_ablation::<f32>(&ctx, DatasetId::Mnist, 2, Some(&[0])).unwrap();
        let records = load_records(&out.path().join("r.jsonl")).unwrap();
        assert_eq!(records.len(), 4); // 2 seeds x 2 alphas
        let with: Vec<_> = records
            .iter()
            .filter(|r| r.sweep_value != Some(0.0))
            .collect();
        let without: Vec<_> = records
            .iter()
            .filter(|r| r.sweep_value == Some(0.0))
            .collect();
        assert_eq!(with.len(), 2);
        for w in &with {
            assert!(without.iter().any(|o| o.seed == w.seed));
        }
        assert!(records.iter().all(|r| r.trace_losses.is_some()));
    }

    #[test]
    fn sensitivity_reports_spread_per_size() {
        let data = synthetic_mnist_root(90, 30);
        let out = tempfile::tempdir().unwrap();
        let ctx = fast_ctx(data.path(), &out.path().join("r.jsonl"));
        let table = run_sensitivity::<f32>(&ctx, DatasetId::Mnist, 0, &[2, 3], 3).unwrap();
        assert_eq!(table.rows.len(), 2);
        for row in &table.rows {
            assert_eq!(row.count, 3);
            assert!(row.auc_min <= row.mean_auc && row.mean_auc <= row.auc_max);
        }
    }

    #[test]
    fn builtin_defaults_parse_and_cover_all_datasets() {
        let cfg = ConfigFile::builtin();
        for id in [
            DatasetId::Mnist,
            DatasetId::Fmnist,
            DatasetId::Cifar10,
            DatasetId::Mvtec,
        ] {
            let defaults = cfg.defaults_for(id).unwrap();
            defaults.validate().unwrap();
        }
    }

    #[test]
    fn derive_seed_is_order_sensitive_and_stable() {
        let a = derive_seed(&[1, 2, 3]);
        let b = derive_seed(&[1, 2, 3]);
        let c = derive_seed(&[3, 2, 1]);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
