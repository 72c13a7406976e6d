//! Persistent run records and aggregation.
//!
//! Every trained run appends one JSON line to an append-only record file.
//! Re-running an identical (study, dataset, class, seed, variant,
//! sweep-point, config) never overwrites anything: the new record is
//! appended with its `duplicate` flag set and a warning is logged.

use crate::datasets::DatasetId;
use crate::trainer::TrainConfig;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Fewsome,
    Smart,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Fewsome => write!(f, "fewsome"),
            Variant::Smart => write!(f, "smart"),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fewsome" => Ok(Variant::Fewsome),
            "smart" | "smart-fewsome" | "s-fewsome" => Ok(Variant::Smart),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

/// One training+evaluation run. Metric fields are absent when the run
/// failed; `failed` then carries the error text.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub study: String,
    pub dataset_id: DatasetId,
    pub normal_class: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_name: Option<String>,
    pub seed: u64,
    pub variant: Variant,
    /// Sweep coordinate: N for size sweeps, rate for contamination,
    /// alpha for ablations; absent for plain benchmarks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_value: Option<f64>,
    #[serde(default)]
    pub contamination_rate: f64,
    pub config: TrainConfig,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balanced_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stopped_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collapse_flag: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed: Option<String>,
    #[serde(default)]
    pub duplicate: bool,
    /// Per-epoch losses, kept when a study needs loss curves (ablation).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_losses: Option<Vec<f64>>,
}

impl RunRecord {
    pub fn succeeded(&self) -> bool {
        self.failed.is_none()
    }

    /// Identity used for duplicate detection.
    pub fn dedup_key(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}|{}",
            self.study,
            self.dataset_id,
            self.normal_class,
            self.seed,
            self.variant,
            self.sweep_value
                .map(|v| format!("{v:.6}"))
                .unwrap_or_else(|| "-".into()),
            self.config_hash,
        )
    }
}

/// Stable hash of the canonical config JSON.
pub fn config_hash(config: &TrainConfig) -> String {
    let mut hasher = Sha256::new();
    hasher.update(config.to_canonical_json().as_bytes());
    let digest = hasher.finalize();
    format!("{digest:x}")[..16].to_string()
}

/// Verifies the record file is appendable (creating parent directories)
/// before any training starts.
pub fn ensure_appendable(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map(|_| ())
        .map_err(|e| Error::io(path, e))
}

/// Loads every parseable record from a newline-delimited record file.
pub fn load_records(path: &Path) -> Result<Vec<RunRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RunRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Records(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Appends records, marking duplicates of already-persisted runs. Returns
/// the number of records flagged as duplicates.
pub fn persist_results(records: &mut [RunRecord], path: &Path) -> Result<usize> {
    ensure_appendable(path)?;
    let mut seen: BTreeSet<String> = if path.exists() {
        load_records(path)?
            .iter()
            .map(RunRecord::dedup_key)
            .collect()
    } else {
        BTreeSet::new()
    };
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut duplicates = 0;
    for record in records.iter_mut() {
        let key = record.dedup_key();
        if seen.contains(&key) {
            record.duplicate = true;
            duplicates += 1;
            log::warn!("duplicate run appended (not overwritten): {key}");
        }
        seen.insert(key);
        let line = serde_json::to_string(record).expect("record serialises");
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(duplicates)
}

/// How to group records when aggregating.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupBy {
    /// One row per dataset (benchmark tables).
    Dataset,
    /// One row per sweep value (size/contamination sweeps, sensitivity).
    SweepValue,
    /// One row per (class, sweep value) pair (ablation).
    ClassAndSweep,
}

#[derive(Clone, Debug, Serialize)]
pub struct AggregateRow {
    pub dataset_id: DatasetId,
    pub normal_class: Option<u32>,
    pub class_name: Option<String>,
    pub sweep_value: Option<f64>,
    pub mean_auc: f64,
    pub auc_std: f64,
    pub auc_min: f64,
    pub auc_max: f64,
    pub mean_f1: f64,
    pub mean_balanced_accuracy: f64,
    pub mean_train_seconds: f64,
    pub collapse_rate: f64,
    /// Successful runs aggregated into this row.
    pub count: usize,
    /// Failed runs excluded from the row.
    pub excluded: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct AggregateTable {
    pub study: String,
    pub rows: Vec<AggregateRow>,
}

impl AggregateTable {
    /// Mean AUC across all rows (weighted by run count).
    pub fn overall_mean_auc(&self) -> Option<f64> {
        let total: usize = self.rows.iter().map(|r| r.count).sum();
        if total == 0 {
            return None;
        }
        Some(
            self.rows
                .iter()
                .map(|r| r.mean_auc * r.count as f64)
                .sum::<f64>()
                / total as f64,
        )
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Aggregates non-duplicate records; failures count into `excluded`.
pub fn aggregate(study: &str, records: &[RunRecord], group_by: GroupBy) -> AggregateTable {
    let relevant: Vec<&RunRecord> = records
        .iter()
        .filter(|r| r.study == study && !r.duplicate)
        .collect();

    let mut groups: Vec<(String, Vec<&RunRecord>)> = Vec::new();
    for record in relevant {
        let key = match group_by {
            GroupBy::Dataset => format!("{}", record.dataset_id),
            GroupBy::SweepValue => format!(
                "{}|{}",
                record.dataset_id,
                record
                    .sweep_value
                    .map(|v| format!("{v:.6}"))
                    .unwrap_or_default()
            ),
            GroupBy::ClassAndSweep => format!(
                "{}|{}|{}",
                record.dataset_id,
                record.normal_class,
                record
                    .sweep_value
                    .map(|v| format!("{v:.6}"))
                    .unwrap_or_default()
            ),
        };
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(record),
            None => groups.push((key, vec![record])),
        }
    }

    let mut rows = Vec::new();
    for (_, members) in groups {
        let ok: Vec<&&RunRecord> = members.iter().filter(|r| r.succeeded()).collect();
        let excluded = members.len() - ok.len();
        if excluded > 0 {
            log::warn!(
                "aggregation excludes {excluded} failed run(s) for {} {}",
                members[0].dataset_id,
                members[0]
                    .sweep_value
                    .map(|v| format!("sweep={v}"))
                    .unwrap_or_default()
            );
        }
        let aucs: Vec<f64> = ok.iter().filter_map(|r| r.auc).collect();
        let f1s: Vec<f64> = ok.iter().filter_map(|r| r.f1).collect();
        let bas: Vec<f64> = ok.iter().filter_map(|r| r.balanced_accuracy).collect();
        let secs: Vec<f64> = ok.iter().filter_map(|r| r.train_seconds).collect();
        let collapses = ok
            .iter()
            .filter(|r| r.collapse_flag.unwrap_or(false))
            .count();
        let first = members[0];
        rows.push(AggregateRow {
            dataset_id: first.dataset_id,
            normal_class: if group_by == GroupBy::ClassAndSweep {
                Some(first.normal_class)
            } else {
                None
            },
            class_name: if group_by == GroupBy::ClassAndSweep {
                first.class_name.clone()
            } else {
                None
            },
            sweep_value: first.sweep_value,
            mean_auc: mean(&aucs),
            auc_std: std_dev(&aucs),
            auc_min: aucs.iter().copied().fold(f64::INFINITY, f64::min),
            auc_max: aucs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean_f1: mean(&f1s),
            mean_balanced_accuracy: mean(&bas),
            mean_train_seconds: mean(&secs),
            collapse_rate: if ok.is_empty() {
                0.0
            } else {
                collapses as f64 / ok.len() as f64
            },
            count: ok.len(),
            excluded,
        });
    }
    rows.sort_by(|a, b| {
        (a.dataset_id.dir_name(), a.normal_class, a.sweep_value.unwrap_or(0.0))
            .partial_cmp(&(b.dataset_id.dir_name(), b.normal_class, b.sweep_value.unwrap_or(0.0)))
            .expect("finite sort keys")
    });
    AggregateTable {
        study: study.to_string(),
        rows,
    }
}

/// Writes the aggregate table as columnar text with a header row.
pub fn write_aggregate(table: &AggregateTable, path: &Path) -> Result<PathBuf> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(
        file,
        "study,dataset,normal_class,class_name,sweep_value,mean_auc,auc_std,auc_min,auc_max,\
         mean_f1,mean_balanced_accuracy,mean_train_seconds,collapse_rate,count,excluded"
    )
    .map_err(|e| Error::io(path, e))?;
    for r in &table.rows {
        writeln!(
            file,
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3},{:.3},{},{}",
            table.study,
            r.dataset_id,
            r.normal_class.map(|c| c.to_string()).unwrap_or_default(),
            r.class_name.clone().unwrap_or_default(),
            r.sweep_value.map(|v| v.to_string()).unwrap_or_default(),
            r.mean_auc,
            r.auc_std,
            r.auc_min,
            r.auc_max,
            r.mean_f1,
            r.mean_balanced_accuracy,
            r.mean_train_seconds,
            r.collapse_rate,
            r.count,
            r.excluded
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(path.to_path_buf())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::{Architecture, InitMode};

    #[allow(dead_code)]
    pub(crate) fn test_record(class: u32, seed: u64, auc: f64) -> RunRecord {
        let config = TrainConfig {
            n: 4,
            k: 1,
            l: 1024,
            alpha: 0.5,
            batch_size: 4,
            learning_rate: 1e-4,
            lambda: 0.0,
            architecture: Architecture::Vgg3,
            init_mode: InitMode::Kaiming,
            smart: false,
            seed,
            patience: 2,
            loss_decrease_threshold: 0.005,
            max_epochs: 10,
            smart_per_iteration: false,
            freeze_norm_stats: false,
            pretrained_weights: None,
        };
        let config_hash = config_hash(&config);
        RunRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            study: "benchmark".into(),
            dataset_id: DatasetId::Mnist,
            normal_class: class,
            class_name: None,
            seed,
            variant: Variant::Fewsome,
            sweep_value: None,
            contamination_rate: 0.0,
            config,
            config_hash,
            auc: Some(auc),
            f1: Some(0.9),
            balanced_accuracy: Some(0.8),
            train_seconds: Some(1.0),
            stopped_epoch: Some(5),
            collapse_flag: Some(false),
            failed: None,
            duplicate: false,
            trace_losses: None,
        }
    }

    #[test]
    fn persist_roundtrip_and_duplicate_flagging() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs").join("records.jsonl");

        let mut first = vec![test_record(0, 1, 0.95), test_record(0, 2, 0.97)];
        let dups = persist_results(&mut first, &path).unwrap();
        assert_eq!(dups, 0);

        let loaded = load_records(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert!((loaded[0].auc.unwrap() - 0.95).abs() < 1e-12);

        // identical (config, seed) -> appended with the duplicate flag
        let mut again = vec![test_record(0, 1, 0.96)];
        let dups = persist_results(&mut again, &path).unwrap();
        assert_eq!(dups, 1);
        assert!(again[0].duplicate);
        let loaded = load_records(&path).unwrap();
        assert_eq!(loaded.len(), 3, "append-only: nothing overwritten");
        assert!(loaded[2].duplicate);
    }

    #[test]
    fn unwritable_path_fails_before_training() {
        let err = ensure_appendable(Path::new("/proc/definitely/not/writable.jsonl"));
        assert!(err.is_err());
    }

    #[test]
    fn aggregate_means_match_members() {
        let records = vec![
            test_record(0, 1, 0.90),
            test_record(0, 2, 0.94),
            test_record(1, 1, 0.98),
        ];
        let table = aggregate("benchmark", &records, GroupBy::Dataset);
        assert_eq!(table.rows.len(), 1);
        let row = &table.rows[0];
        assert_eq!(row.count, 3);
        let expect = (0.90 + 0.94 + 0.98) / 3.0;
        assert!((row.mean_auc - expect).abs() < 1e-9);
        assert!((row.auc_min - 0.90).abs() < 1e-12);
        assert!((row.auc_max - 0.98).abs() < 1e-12);
    }

    #[test]
    fn aggregate_excludes_failures_and_duplicates() {
        let mut failed = test_record(0, 3, 0.0);
        failed.auc = None;
        failed.failed = Some("boom".into());
        let mut dup = test_record(0, 1, 0.5);
        dup.duplicate = true;
        let records = vec![test_record(0, 1, 0.9), failed, dup];
        let table = aggregate("benchmark", &records, GroupBy::Dataset);
        let row = &table.rows[0];
        assert_eq!(row.count, 1);
        assert_eq!(row.excluded, 1);
        assert!((row.mean_auc - 0.9).abs() < 1e-12);
    }

    #[test]
    fn aggregate_recomputed_from_persisted_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        let mut records = vec![
            test_record(0, 1, 0.91),
            test_record(1, 1, 0.93),
            test_record(2, 1, 0.99),
        ];
        let in_memory = aggregate("benchmark", &records, GroupBy::Dataset);
        persist_results(&mut records, &path).unwrap();
        let reloaded = load_records(&path).unwrap();
        let from_disk = aggregate("benchmark", &reloaded, GroupBy::Dataset);
        assert!(
            (in_memory.rows[0].mean_auc - from_disk.rows[0].mean_auc).abs() < 1e-9,
            "persisted aggregation must reproduce the in-memory table"
        );
    }

    #[test]
    fn sweep_grouping_produces_one_row_per_value() {
        let mut records = Vec::new();
        for &n in &[2.0, 5.0] {
            for seed in 0..3 {
                let mut r = test_record(0, seed, 0.8 + n / 100.0);
                r.study = "size_sweep".into();
                r.sweep_value = Some(n);
                records.push(r);
            }
        }
        let table = aggregate("size_sweep", &records, GroupBy::SweepValue);
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.rows[0].sweep_value, Some(2.0));
        assert_eq!(table.rows[0].count, 3);
    }
}
