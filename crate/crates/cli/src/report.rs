//! Evaluation reports, routing tables and their text renderings.

use std::fmt::Write as _;
use std::path::Path;

use dapnet_core::data::Split;
use dapnet_core::loss::LossBreakdown;
use dapnet_core::moe::{RoutingRecord, RoutingStats};
use dapnet_core::train::{Metrics, Predictions, RoutingStatsRecord};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub best_epoch: usize,
    pub stop_epoch: usize,
    pub early_stopped: bool,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    /// Which split the numbers describe.
    pub split: Split,
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingSummary>,
    pub loss: LossBreakdown,
    pub metrics: Metrics,
    /// Per-layer routing statistics over the split.
    pub routing: Vec<RoutingStatsRecord>,
}

impl Report {
    pub fn new(split: Split, p: &Predictions, classes: &[String], training: Option<TrainingSummary>) -> Self {
        Self {
            version: REPORT_VERSION,
            split,
            samples: p.labels.len(),
            training,
            loss: p.loss,
            metrics: Metrics::from_predictions(&p.preds, &p.labels, classes),
            routing: p
                .records
                .iter()
                .map(|r| RoutingStatsRecord::from(&RoutingStats::from_records(r)))
                .collect(),
        }
    }

    pub fn table(&self) -> String {
        let m = &self.metrics;
        let width = m.per_class.iter().map(|c| c.class.len()).max().unwrap_or(0).max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "split {:?}  samples {}  accuracy {:.6}",
            self.split, self.samples, m.accuracy
        );
        let _ = writeln!(
            s,
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}",
            "class", "precision", "recall", "f1", "support"
        );
        for c in &m.per_class {
            let _ = writeln!(
                s,
                "{:<width$}  {:>9.6}  {:>9.6}  {:>9.6}  {:>7}",
                c.class, c.precision, c.recall, c.f1, c.support
            );
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:>9.6}  {:>9.6}  {:>9.6}  {:>7}",
            "macro", m.macro_precision, m.macro_recall, m.macro_f1, self.samples
        );
        s
    }
}

/// Mean gate weights of one class in one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingRow {
    pub layer: usize,
    pub class: String,
    pub n: usize,
    pub weights: Vec<f64>,
}

/// Per-layer, per-class mean of the fusion weights. Classes with no samples are left out.
pub fn routing_rows(records: &[Vec<RoutingRecord>], labels: &[usize], classes: &[String]) -> Vec<RoutingRow> {
    let mut rows = Vec::new();
    for (layer, recs) in records.iter().enumerate() {
        let n_experts = recs.first().map_or(0, |r| r.weights.len());
        for (ci, class) in classes.iter().enumerate() {
            let mut sum = vec![0.0; n_experts];
            let mut n = 0;
            for (r, _) in recs.iter().zip(labels).filter(|(_, &y)| y == ci) {
                sum.iter_mut().zip(&r.weights).for_each(|(a, w)| *a += w);
                n += 1;
            }
            if n > 0 {
                rows.push(RoutingRow {
                    layer,
                    class: class.clone(),
                    n,
                    weights: sum.into_iter().map(|s| s / n as f64).collect(),
                });
            }
        }
    }
    rows
}

fn cells(row: &RoutingRow) -> Vec<String> {
    let mut out = vec![row.layer.to_string(), row.class.clone(), row.n.to_string()];
    out.extend(row.weights.iter().map(|w| format!("{w:.9}")));
    out
}

fn header(experts: &[&str]) -> Vec<String> {
    ["layer", "class", "n"]
        .iter()
        .chain(experts)
        .map(|s| s.to_string())
        .collect()
}

pub fn write_routing_csv(path: &Path, experts: &[&str], rows: &[RoutingRow]) -> CliResult<()> {
    let fail = |e: csv::Error| CliError::data(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(fail)?;
    w.write_record(header(experts)).map_err(fail)?;
    for row in rows {
        w.write_record(cells(row)).map_err(fail)?;
    }
    w.flush()
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// Whitespace-aligned rendering with the same cell text as the CSV.
pub fn routing_table(experts: &[&str], rows: &[RoutingRow]) -> String {
    let mut grid = vec![header(experts)];
    grid.extend(rows.iter().map(cells));
    let cols = grid[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| grid.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for r in &grid {
        let line: Vec<String> = r.iter().zip(&widths).map(|(cell, w)| format!("{cell:>w$}")).collect();
        let _ = writeln!(s, "{}", line.join("  "));
    }
    s
}
