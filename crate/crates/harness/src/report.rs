//! Run reports and their on-disk forms.
//!
//! A run directory holds `report.json` (the full [`RunReport`]),
//! `loss.csv`, `grads.csv`, `histogram.csv`, `spectra.csv` and
//! `checkpoint.bin`. Column orders are fixed by the `*_HEADER` constants.

use std::fs;
use std::io::Write;
use std::path::Path;

use dnt_core::diagnostics::{median, RunDiagnostics};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

pub const ARTIFACT_VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub config: RunConfig,
    pub seed: u64,
    pub parameter_count: usize,
    /// Validation loss before the first update.
    pub initial_loss: f64,
    /// Validation loss after the last update.
    pub final_loss: f64,
    /// Cross-entropy of the true chain on the validation split.
    pub loss_floor: f64,
    pub entropy_rate: f64,
    /// Training-batch loss at each step, before that step's update.
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    /// Global gradient norm before clipping.
    pub grad_norms: Vec<f64>,
    /// `(completed steps, validation loss)` pairs.
    pub evals: Vec<(usize, f64)>,
    /// Gradient snapshots are taken before clipping.
    pub diagnostics: RunDiagnostics,
    pub wall_clock_secs: f64,
}

impl RunReport {
    /// Median `q99/q50` over weight matrices, per snapshot step.
    pub fn median_tail_ratio_by_step(&self) -> Vec<(usize, f64)> {
        let mut steps: Vec<usize> = self.diagnostics.grads.iter().map(|g| g.step).collect();
        steps.dedup();
        steps
            .into_iter()
            .filter_map(|s| {
                let r: Vec<f64> = self
                    .diagnostics
                    .grads
                    .iter()
                    .filter(|g| g.step == s)
                    .filter_map(|g| g.tail_ratio)
                    .collect();
                median(&r).map(|m| (s, m))
            })
            .collect()
    }

    /// Median `q99/q50` over every weight matrix and snapshot.
    pub fn median_tail_ratio(&self) -> Option<f64> {
        let r: Vec<f64> = self.diagnostics.grads.iter().filter_map(|g| g.tail_ratio).collect();
        median(&r)
    }

    pub fn median_kurtosis(&self) -> Option<f64> {
        let r: Vec<f64> = self.diagnostics.grads.iter().filter_map(|g| g.excess_kurtosis).collect();
        median(&r)
    }
}

pub const LOSS_HEADER: [&str; 4] = ["step", "loss", "lr", "grad_norm"];
pub const GRADS_HEADER: [&str; 13] = [
    "step",
    "name",
    "entries",
    "excess_kurtosis",
    "q50",
    "q90",
    "q99",
    "max",
    "tail_ratio",
    "frac_above_10x_median",
    "frac_above_100x_median",
    "degenerate",
    "underflow",
];
pub const HISTOGRAM_HEADER: [&str; 6] = ["step", "name", "bin", "lo", "hi", "count"];
pub const SPECTRA_HEADER: [&str; 5] = ["name", "sigma_max", "sigma_min", "condition", "effective_rank"];
pub const ABLATION_HEADER: [&str; 11] = [
    "setting",
    "optimizer",
    "seed",
    "status",
    "initial_loss",
    "final_loss",
    "loss_floor",
    "gap_to_floor",
    "median_tail_ratio",
    "median_kurtosis",
    "wall_clock_secs",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

fn f(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn write_loss_csv(path: &Path, r: &RunReport) -> Result<()> {
    let rows = (0..r.losses.len()).map(|i| vec![i.to_string(), f(r.losses[i]), f(r.lrs[i]), f(r.grad_norms[i])]);
    write_rows(path, &LOSS_HEADER, rows)
}

pub fn write_grads_csv(path: &Path, d: &RunDiagnostics) -> Result<()> {
    let rows = d.grads.iter().map(|g| {
        vec![
            g.step.to_string(),
            g.name.clone(),
            g.entries.to_string(),
            opt(g.excess_kurtosis),
            f(g.q50),
            f(g.q90),
            f(g.q99),
            f(g.max),
            opt(g.tail_ratio),
            f(g.frac_above_10x_median),
            f(g.frac_above_100x_median),
            g.degenerate.to_string(),
            g.histogram.underflow.to_string(),
        ]
    });
    write_rows(path, &GRADS_HEADER, rows)
}

pub fn write_histogram_csv(path: &Path, d: &RunDiagnostics) -> Result<()> {
    let mut rows = Vec::new();
    for g in &d.grads {
        let edges = g.histogram.bins.edges();
        for (b, &c) in g.histogram.counts.iter().enumerate() {
            rows.push(vec![
                g.step.to_string(),
                g.name.clone(),
                b.to_string(),
                f(edges[b]),
                f(edges[b + 1]),
                c.to_string(),
            ]);
        }
    }
    write_rows(path, &HISTOGRAM_HEADER, rows)
}

pub fn write_spectra_csv(path: &Path, d: &RunDiagnostics) -> Result<()> {
    let rows = d.spectra.iter().map(|s| {
        vec![
            s.name.clone(),
            f(s.sigma_max),
            f(s.sigma_min),
            f(s.condition),
            f(s.effective_rank),
        ]
    });
    write_rows(path, &SPECTRA_HEADER, rows)
}

/// One row of the settings x optimizers table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub setting: String,
    pub optimizer: String,
    pub seed: u64,
    pub status: String,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub loss_floor: Option<f64>,
    pub median_tail_ratio: Option<f64>,
    pub median_kurtosis: Option<f64>,
    pub wall_clock_secs: Option<f64>,
}

pub fn write_ablation_csv(path: &Path, cells: &[CellSummary]) -> Result<()> {
    let rows = cells.iter().map(|c| {
        vec![
            c.setting.clone(),
            c.optimizer.clone(),
            c.seed.to_string(),
            c.status.clone(),
            opt(c.initial_loss),
            opt(c.final_loss),
            opt(c.loss_floor),
            opt(c.final_loss.zip(c.loss_floor).map(|(a, b)| a - b)),
            opt(c.median_tail_ratio),
            opt(c.median_kurtosis),
            opt(c.wall_clock_secs),
        ]
    });
    write_rows(path, &ABLATION_HEADER, rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, values: &[T]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    for v in values {
        let line = serde_json::to_string(v)?;
        writeln!(file, "{line}").map_err(|e| HarnessError::io(path, e))?;
    }
    Ok(())
}

/// Writes every per-run artifact except the checkpoint into `dir`.
pub fn write_run_dir(dir: &Path, r: &RunReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    write_json(&dir.join("report.json"), r)?;
    write_loss_csv(&dir.join("loss.csv"), r)?;
    write_grads_csv(&dir.join("grads.csv"), &r.diagnostics)?;
    write_jsonl(&dir.join("grads.jsonl"), &r.diagnostics.grads)?;
    write_histogram_csv(&dir.join("histogram.csv"), &r.diagnostics)?;
    write_spectra_csv(&dir.join("spectra.csv"), &r.diagnostics)?;
    Ok(())
}
