//! Figure emission from persisted run records.
//!
//! Plots are rebuilt from the record file alone, so they are reproducible
//! from the artifact a study leaves behind. SVG output keeps the renderer
//! free of system font dependencies.

use super::records::{aggregate, load_records, GroupBy, RunRecord};
use crate::datasets::DatasetId;
use crate::{Error, Result};
use plotters::prelude::*;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

const KNOWN_STUDIES: [&str; 4] = ["size_sweep", "contamination", "ablation", "sensitivity"];

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Records(format!("plot rendering failed: {e}"))
}

/// Renders the figures for one study from a record file into `out_dir`;
/// returns the written image paths.
pub fn emit_plots(records_path: &Path, study: &str, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let records = load_records(records_path)?;
    let matching: Vec<RunRecord> = records
        .iter()
        .filter(|r| r.study == study && !r.duplicate)
        .cloned()
        .collect();
    if matching.is_empty() {
        let available: BTreeSet<&str> = records
            .iter()
            .map(|r| r.study.as_str())
            .filter(|s| KNOWN_STUDIES.contains(s))
            .collect();
        return Err(Error::Records(format!(
            "no '{study}' records in {}; studies with records: [{}]",
            records_path.display(),
            available.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    match study {
        "size_sweep" => size_sweep_plots(&matching, out_dir),
        "sensitivity" => sensitivity_plots(&matching, out_dir),
        "ablation" => ablation_plots(&matching, out_dir),
        "contamination" => contamination_plots(&matching, out_dir),
        other => Err(Error::Config(format!(
            "study '{other}' has no figures; choose one of {KNOWN_STUDIES:?}"
        ))),
    }
}

fn datasets_in(records: &[RunRecord]) -> Vec<DatasetId> {
    let mut ids: Vec<DatasetId> = Vec::new();
    for r in records {
        if !ids.contains(&r.dataset_id) {
            ids.push(r.dataset_id);
        }
    }
    ids
}

fn line_chart(
    path: &Path,
    title: &str,
    x_desc: &str,
    y_desc: &str,
    series: &[(String, Vec<(f64, f64)>, RGBColor)],
    star: Option<(f64, f64)>,
    y_range: Option<(f64, f64)>,
) -> Result<()> {
    let root = SVGBackend::new(path, (800, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let xs: Vec<f64> = series
        .iter()
        .flat_map(|(_, pts, _)| pts.iter().map(|p| p.0))
        .collect();
    let ys: Vec<f64> = series
        .iter()
        .flat_map(|(_, pts, _)| pts.iter().map(|p| p.1))
        .collect();
    let x_min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let x_max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (y_min, y_max) = y_range.unwrap_or_else(|| {
        let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = ((hi - lo) * 0.1).max(0.5);
        (lo - pad, hi + pad)
    });

    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(42)
        .y_label_area_size(56)
        .build_cartesian_2d(x_min..x_max.max(x_min + 1e-9), y_min..y_max)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .y_desc(y_desc)
        .draw()
        .map_err(plot_err)?;

    for (label, points, color) in series {
        chart
            .draw_series(LineSeries::new(points.iter().copied(), color))
            .map_err(plot_err)?
            .label(label.clone())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 18, y)], *color)
            });
        chart
            .draw_series(
                points
                    .iter()
                    .map(|&(x, y)| Circle::new((x, y), 3, color.filled())),
            )
            .map_err(plot_err)?;
    }
    if let Some((sx, sy)) = star {
        chart
            .draw_series(std::iter::once(TriangleMarker::new((sx, sy), 8, RED.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// AUC-vs-size curve per dataset (peak marked), plus a training-time curve.
fn size_sweep_plots(records: &[RunRecord], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for dataset in datasets_in(records) {
        let subset: Vec<RunRecord> = records
            .iter()
            .filter(|r| r.dataset_id == dataset)
            .cloned()
            .collect();
        let table = aggregate("size_sweep", &subset, GroupBy::SweepValue);
        let mut auc_points: Vec<(f64, f64)> = table
            .rows
            .iter()
            .filter_map(|r| r.sweep_value.map(|n| (n, r.mean_auc * 100.0)))
            .collect();
        auc_points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let time_points: Vec<(f64, f64)> = table
            .rows
            .iter()
            .filter_map(|r| r.sweep_value.map(|n| (n, r.mean_train_seconds)))
            .collect();
        let peak = auc_points
            .iter()
            .copied()
            .max_by(|a, b| a.1.total_cmp(&b.1));

        let auc_path = out_dir.join(format!("size_sweep_auc_{dataset}.svg"));
        line_chart(
            &auc_path,
            &format!("{dataset}: AUC vs Reference Set size"),
            "Reference Set size N",
            "AUC (%)",
            &[("mean AUC".to_string(), auc_points, BLUE)],
            peak,
            None,
        )?;
        written.push(auc_path);

        let time_path = out_dir.join(format!("size_sweep_time_{dataset}.svg"));
        line_chart(
            &time_path,
            &format!("{dataset}: training time vs Reference Set size"),
            "Reference Set size N",
            "mean training seconds",
            &[("train seconds".to_string(), time_points, MAGENTA)],
            None,
            None,
        )?;
        written.push(time_path);
    }
    Ok(written)
}

/// Mean AUC vs size with the min-max band across Reference resamples.
fn sensitivity_plots(records: &[RunRecord], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for dataset in datasets_in(records) {
        let classes: BTreeSet<u32> = records
            .iter()
            .filter(|r| r.dataset_id == dataset)
            .map(|r| r.normal_class)
            .collect();
        for class in classes {
            let subset: Vec<RunRecord> = records
                .iter()
                .filter(|r| r.dataset_id == dataset && r.normal_class == class)
                .cloned()
                .collect();
            let table = aggregate("sensitivity", &subset, GroupBy::SweepValue);
            let take = |f: fn(&super::records::AggregateRow) -> f64| {
                let mut pts: Vec<(f64, f64)> = table
                    .rows
                    .iter()
                    .filter_map(|r| r.sweep_value.map(|n| (n, f(r) * 100.0)))
                    .collect();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                pts
            };
            let path = out_dir.join(format!("sensitivity_{dataset}_class{class}.svg"));
            line_chart(
                &path,
                &format!("{dataset} class {class}: AUC over Reference resamples"),
                "Reference Set size N",
                "AUC (%)",
                &[
                    ("mean".to_string(), take(|r| r.mean_auc), BLUE),
                    ("min".to_string(), take(|r| r.auc_min), RGBColor(150, 150, 220)),
                    ("max".to_string(), take(|r| r.auc_max), RGBColor(150, 150, 220)),
                ],
                None,
                None,
            )?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Barplot of per-class AUC increase from the stop term, plus paired loss
/// curves for the first classes.
fn ablation_plots(records: &[RunRecord], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for dataset in datasets_in(records) {
        let subset: Vec<RunRecord> = records
            .iter()
            .filter(|r| r.dataset_id == dataset)
            .cloned()
            .collect();
        let table = aggregate("ablation", &subset, GroupBy::ClassAndSweep);
        // percentage AUC increase per class from including the stop term
        let classes: BTreeSet<u32> = table.rows.iter().filter_map(|r| r.normal_class).collect();
        let mut increases: Vec<(u32, f64)> = Vec::new();
        for &c in &classes {
            let with = table
                .rows
                .iter()
                .find(|r| r.normal_class == Some(c) && r.sweep_value != Some(0.0));
            let without = table
                .rows
                .iter()
                .find(|r| r.normal_class == Some(c) && r.sweep_value == Some(0.0));
            if let (Some(w), Some(wo)) = (with, without) {
                if wo.mean_auc > 0.0 {
                    increases.push((c, (w.mean_auc - wo.mean_auc) / wo.mean_auc * 100.0));
                }
            }
        }

        let bar_path = out_dir.join(format!("ablation_increase_{dataset}.svg"));
        {
            let root = SVGBackend::new(&bar_path, (800, 520)).into_drawing_area();
            root.fill(&WHITE).map_err(plot_err)?;
            let y_max = increases
                .iter()
                .map(|&(_, v)| v)
                .fold(1.0f64, f64::max)
                * 1.15;
            let y_min = increases.iter().map(|&(_, v)| v).fold(0.0f64, f64::min) * 1.15;
            let x_max = increases.len() as i32;
            let mut chart = ChartBuilder::on(&root)
                .caption(
                    format!("{dataset}: AUC increase from the stop term (%)"),
                    ("sans-serif", 22),
                )
                .margin(12)
                .x_label_area_size(42)
                .y_label_area_size(56)
                .build_cartesian_2d(-1i32..x_max, y_min..y_max)
                .map_err(plot_err)?;
            chart
                .configure_mesh()
                .x_desc("normal class")
                .y_desc("AUC increase (%)")
                .x_label_formatter(&|i| {
                    increases
                        .get(*i as usize)
                        .map(|(c, _)| c.to_string())
                        .unwrap_or_default()
                })
                .draw()
                .map_err(plot_err)?;
            chart
                .draw_series(increases.iter().enumerate().map(|(i, &(_, v))| {
                    Rectangle::new([(i as i32, 0.0), (i as i32 + 1, v)], BLUE.mix(0.6).filled())
                }))
                .map_err(plot_err)?;
            root.present().map_err(plot_err)?;
        }
        written.push(bar_path);

        // paired loss curves for up to two classes
        for &c in classes.iter().take(2) {
            let curve = |want_zero: bool| -> Option<Vec<(f64, f64)>> {
                subset
                    .iter()
                    .filter(|r| {
                        r.normal_class == c
                            && (r.sweep_value == Some(0.0)) == want_zero
                            && r.trace_losses.is_some()
                    })
                    .min_by_key(|r| r.seed)
                    .and_then(|r| r.trace_losses.as_ref())
                    .map(|losses| {
                        losses
                            .iter()
                            .enumerate()
                            .map(|(e, &l)| ((e + 1) as f64, l))
                            .collect()
                    })
            };
            if let (Some(with), Some(without)) = (curve(false), curve(true)) {
                let path = out_dir.join(format!("ablation_loss_{dataset}_class{c}.svg"));
                line_chart(
                    &path,
                    &format!("{dataset} class {c}: training loss by epoch"),
                    "epoch",
                    "mean objective",
                    &[
                        ("with stop term".to_string(), with, BLUE),
                        ("without stop term".to_string(), without, RED),
                    ],
                    None,
                    None,
                )?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

/// AUC vs contamination rate per dataset.
fn contamination_plots(records: &[RunRecord], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for dataset in datasets_in(records) {
        let subset: Vec<RunRecord> = records
            .iter()
            .filter(|r| r.dataset_id == dataset)
            .cloned()
            .collect();
        let table = aggregate("contamination", &subset, GroupBy::SweepValue);
        let mut points: Vec<(f64, f64)> = table
            .rows
            .iter()
            .filter_map(|r| r.sweep_value.map(|rate| (rate * 100.0, r.mean_auc * 100.0)))
            .collect();
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path = out_dir.join(format!("contamination_{dataset}.svg"));
        line_chart(
            &path,
            &format!("{dataset}: AUC vs training contamination"),
            "contamination rate (%)",
            "AUC (%)",
            &[("mean AUC".to_string(), points, BLUE)],
            None,
            None,
        )?;
        written.push(path);
    }
    Ok(written)
}
