//! Classification metrics, per-class percent-change tables, and report rendering.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::fer::{LabeledExample, EMOTION_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::model::{images_to_tensor, Model, ModelSpec};
use crate::train::{run_perturb_scheme_from, train_phase1, RunData, TrainConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Row order used by change tables.
pub const CHANGE_TABLE_ORDER: [usize; NUM_CLASSES] = [0, 3, 4, 6, 5, 1, 2];

const EVAL_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub samples: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `None` for classes with no instances in the evaluated split.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub per_class_f1: Vec<Option<f64>>,
    /// Rows are true labels, columns predictions.
    pub confusion: Vec<Vec<usize>>,
}

impl MetricsReport {
    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Result<Self> {
        let n = confusion.len();
        if confusion.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        let samples: usize = confusion.iter().flatten().sum();
        if samples == 0 {
            return Err(Error::Contract("cannot report on zero samples".into()));
        }
        let trace: usize = (0..n).map(|c| confusion[c][c]).sum();
        let mut per_class_accuracy = Vec::with_capacity(n);
        let mut per_class_f1 = Vec::with_capacity(n);
        for c in 0..n {
            let tp = confusion[c][c];
            let row: usize = confusion[c].iter().sum();
            let col: usize = confusion.iter().map(|r| r[c]).sum();
            if row == 0 {
                per_class_accuracy.push(None);
                per_class_f1.push(None);
                continue;
            }
            per_class_accuracy.push(Some(tp as f64 / row as f64));
            // 2·tp / (2·tp + fp + fn), with 0/0 read as 0.
            let denom = row + col;
            per_class_f1.push(Some(if tp == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 }));
        }
        let present: Vec<f64> = per_class_f1.iter().flatten().copied().collect();
        let macro_f1 = present.iter().sum::<f64>() / present.len() as f64;
        Ok(MetricsReport {
            schema_version: REPORT_SCHEMA_VERSION,
            samples,
            accuracy: trace as f64 / samples as f64,
            macro_f1,
            per_class_accuracy,
            per_class_f1,
            confusion,
        })
    }

    pub fn from_predictions(labels: &[usize], predictions: &[usize], classes: usize) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::Shape(format!(
                "{} labels but {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        let mut confusion = vec![vec![0; classes]; classes];
        for (&t, &p) in labels.iter().zip(predictions) {
            if t >= classes || p >= classes {
                return Err(Error::Index(format!("class index outside [0, {classes})")));
            }
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best })
}

/// Predicted class per example; chunks are scored in parallel and joined in order.
pub fn predict_labels(model: &Model, examples: &[&LabeledExample]) -> Result<Vec<usize>> {
    let chunks: Vec<Result<Vec<usize>>> = examples
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let logits = model.logits(&images_to_tensor(chunk.iter().map(|e| &e.image)))?;
            Ok(logits.data().chunks(NUM_CLASSES).map(argmax).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(examples.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

pub fn evaluate(model: &Model, examples: &[&LabeledExample]) -> Result<MetricsReport> {
    if examples.is_empty() {
        return Err(Error::Contract("evaluation split is empty".into()));
    }
    let predictions = predict_labels(model, examples)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    MetricsReport::from_predictions(&labels, &predictions, NUM_CLASSES)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeRow {
    pub class_index: usize,
    pub class_name: String,
    pub baseline: Option<f64>,
    pub comparison: Option<f64>,
    /// Percent change; `None` when the baseline is zero or missing.
    pub change: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeTable {
    pub rows: Vec<ChangeRow>,
}

pub const UNDEFINED: &str = "undefined";

pub fn percent_change(baseline: &MetricsReport, comparison: &MetricsReport) -> Result<ChangeTable> {
    let n = baseline.per_class_accuracy.len();
    if comparison.per_class_accuracy.len() != n {
        return Err(Error::Shape("reports cover different class sets".into()));
    }
    let order: Vec<usize> = if n == NUM_CLASSES {
        CHANGE_TABLE_ORDER.to_vec()
    } else {
        (0..n).collect()
    };
    let rows = order
        .into_iter()
        .map(|c| {
            let (b, m) = (baseline.per_class_accuracy[c], comparison.per_class_accuracy[c]);
            let change = match (b, m) {
                (Some(b), Some(m)) if b != 0.0 => Some((m - b) / b * 100.0),
                _ => None,
            };
            ChangeRow {
                class_index: c,
                class_name: EMOTION_NAMES.get(c).map_or_else(|| format!("class {c}"), |s| s.to_string()),
                baseline: b,
                comparison: m,
                change,
            }
        })
        .collect();
    Ok(ChangeTable { rows })
}

impl ChangeTable {
    pub fn formatted(&self) -> Vec<(String, String)> {
        self.rows
            .iter()
            .map(|r| {
                let cell = match r.change {
                    Some(v) => {
                        let v = v.round();
                        // Avoid printing "-0%".
                        let v = if v == 0.0 { 0.0 } else { v };
                        format!("{v:+.0}%")
                    }
                    None => UNDEFINED.to_string(),
                };
                (r.class_name.clone(), cell)
            })
            .collect()
    }

    pub fn render(&self, title: &str) -> String {
        let mut out = String::new();
        let cells = self.formatted();
        let w = cells.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(7);
        let _ = writeln!(out, "{:<w$}  {}", "Emotion", title);
        for (name, cell) in cells {
            let _ = writeln!(out, "{name:<w$}  {cell:>w2$}", w2 = title.len());
        }
        out
    }
}

/// Aligned `Model  Accuracy  F1` table.
pub fn render_metrics_table(rows: &[(&str, &MetricsReport)]) -> String {
    let w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<w$}  {:>8}  {:>5}\n", "Model", "Accuracy", "F1");
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{name:<w$}  {:>7.1}%  {:>5.2}",
            r.accuracy * 100.0,
            r.macro_f1
        );
    }
    out
}

/// Aligned per-class accuracy table with one column per report.
pub fn render_per_class_table(columns: &[(&str, &MetricsReport)]) -> String {
    let mut out = format!("{:<9}", "Emotion");
    for (name, _) in columns {
        let _ = write!(out, "  {name:>10}");
    }
    out.push('\n');
    for (c, emotion) in EMOTION_NAMES.iter().enumerate() {
        let _ = write!(out, "{emotion:<9}");
        for (name, r) in columns {
            let width = name.len().max(10);
            match r.per_class_accuracy.get(c).copied().flatten() {
                Some(a) => {
                    let _ = write!(out, "  {:>width$}", format!("{:.1}%", a * 100.0));
                }
                None => {
                    let _ = write!(out, "  {:>width$}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

/// One point of the cluster-count sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub accuracy: f64,
    pub occluded_accuracy: Option<f64>,
}

/// Runs the scheme once per k with a shared seed. The attention classifier does
/// not depend on k, so it is trained once and reused.
pub fn sweep_clusters(
    data: RunData<'_>,
    attention: &ModelSpec,
    predictor: &ModelSpec,
    config: &TrainConfig,
    k_values: &[usize],
) -> Result<Vec<SweepRow>> {
    if k_values.is_empty() {
        return Err(Error::Contract("sweep needs at least one k".into()));
    }
    if let Some(&k) = k_values.iter().find(|&&k| k == 0) {
        return Err(Error::config("cluster.k", format!("sweep value {k} must be at least 1")));
    }
    let phase1 = train_phase1(data.dataset, attention, config)?;
    k_values
        .iter()
        .map(|&k| {
            let mut cfg = config.clone();
            cfg.cluster.k = k;
            let run = run_perturb_scheme_from(data, phase1.clone(), predictor, &cfg, None)?;
            Ok(SweepRow {
                k,
                accuracy: run.reports.predictor_test.accuracy,
                occluded_accuracy: run.reports.predictor_occluded_test.map(|r| r.accuracy),
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k,accuracy,occluded_accuracy\n");
    for r in rows {
        let occ = r.occluded_accuracy.map_or(String::new(), |a| format!("{a:?}"));
        let _ = writeln!(out, "{},{:?},{occ}", r.k, r.accuracy);
    }
    out
}
