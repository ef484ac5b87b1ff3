//! CSV records for every command that emits a table.

use std::io::Write;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use swat_core::train::EpochStats;
use swat_core::verify::{Bound, CheckReport};
use swat_core::ComplexityReport;

#[derive(Debug, Serialize)]
pub struct LayerRow<'a> {
    pub path: &'a str,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Serialize)]
pub struct CheckRow<'a> {
    pub name: &'a str,
    pub status: &'a str,
    pub worst_case: f64,
    pub tolerance: f64,
    pub bound: &'a str,
    pub seeds: String,
    pub detail: &'a str,
}

impl<'a> From<&'a CheckReport> for CheckRow<'a> {
    fn from(r: &'a CheckReport) -> Self {
        Self {
            name: &r.name,
            status: r.status.as_str(),
            worst_case: r.worst_case,
            tolerance: r.tolerance,
            bound: match r.bound {
                Bound::AtMost => "at_most",
                Bound::Above => "above",
            },
            seeds: r.seeds_used.iter().map(u64::to_string).collect::<Vec<_>>().join(" "),
            detail: &r.detail,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct SweepRow<'a> {
    pub axis: &'a str,
    pub value: usize,
    pub params: Option<u64>,
    pub flops: Option<u64>,
    pub error: String,
}

#[derive(Debug, Serialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub best_loss: f64,
}

impl From<&EpochStats> for HistoryRow {
    fn from(e: &EpochStats) -> Self {
        Self { epoch: e.epoch, loss: e.loss, train_acc: e.train_acc, best_loss: e.best_loss }
    }
}

pub fn write_csv<W: Write, R: Serialize>(out: W, rows: impl IntoIterator<Item = R>) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> anyhow::Result<()> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_csv(f, rows)
}

/// Per-layer rows followed by a `total` row.
pub fn layer_rows(report: &ComplexityReport) -> Vec<LayerRow<'_>> {
    let mut rows: Vec<LayerRow<'_>> =
        report.rows.iter().map(|r| LayerRow { path: &r.path, params: r.params, flops: r.flops }).collect();
    rows.push(LayerRow { path: "total", params: report.total_params(), flops: report.total_flops() });
    rows
}
