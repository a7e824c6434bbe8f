//! Plain-text tables and JSON emission for reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::pipeline::{AblationReport, LayerCalibrationSummary, MetricsReport};

/// Pretty-printed JSON with a trailing newline; the byte-for-byte format the
/// determinism guarantee is stated over.
pub fn json_string(value: &impl Serialize) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

/// Write a value as pretty JSON.
pub fn write_json(path: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
    fs::write(path, json_string(value)?)?;
    Ok(())
}

/// Render the headline metrics and the per-class table.
pub fn render_metrics_table(report: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>9}  {:>8}  {:>8}  {:>8}  {:>8}",
        "episodes", "mIoU", "FB-IoU", "FG-IoU", "BG-IoU"
    );
    let _ = writeln!(
        out,
        "{:>9}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}",
        report.episode_count, report.miou, report.fb_iou, report.fg_iou, report.bg_iou
    );
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:>6}  {:>8}  {:>12}  {:>12}",
        "class", "IoU", "intersection", "union"
    );
    for class in &report.per_class {
        let _ = writeln!(
            out,
            "{:>6}  {:>8.4}  {:>12}  {:>12}",
            class.class_id, class.iou, class.intersection, class.union
        );
    }
    out
}

/// Render the four-variant ablation table with deltas against the base.
pub fn render_ablation_table(report: &AblationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10}  {:>4}  {:>5}  {:>8}  {:>8}  {:>8}",
        "variant", "IMR", "SCMA", "mIoU", "FB-IoU", "delta"
    );
    for variant in &report.variants {
        let _ = writeln!(
            out,
            "{:<10}  {:>4}  {:>5}  {:>8.4}  {:>8.4}  {:>+8.4}",
            variant.name,
            if variant.use_imr { "on" } else { "off" },
            if variant.use_scma_calibration { "on" } else { "off" },
            variant.report.miou,
            variant.report.fb_iou,
            variant.miou_delta
        );
    }
    out
}

/// Render the per-layer pre/post calibration score table.
pub fn render_calibration_table(layers: &[LayerCalibrationSummary]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>5}  {:>10}  {:>10}  {:>10}  {:>10}",
        "layer", "pre", "post", "drop %", "pairs"
    );
    for layer in layers {
        let _ = writeln!(
            out,
            "{:>5}  {:>10.4}  {:>10.4}  {:>10.1}  {:>10}",
            layer.layer, layer.pre_mean, layer.post_mean, layer.reduction_percent, layer.pair_count
        );
    }
    out
}
