//! Settings x optimizers grids.
//!
//! Every cell of a grid trains on the same corpus with the same seeds, so
//! two cells differ only in normalization placement or optimizer.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use dnt_core::diagnostics::compare_runs;
use dnt_core::model::NormSetting;
use dnt_core::optim::OptimizerKind;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::report::{write_json, write_rows, write_run_dir, CellSummary, RunReport};
use crate::train::{train_on, Dataset};

#[derive(Clone, Debug)]
pub struct Grid {
    pub settings: Vec<NormSetting>,
    pub optimizers: Vec<OptimizerKind>,
    pub seeds: Vec<u64>,
    /// Worker threads; cells are independent.
    pub jobs: usize,
}

impl Grid {
    pub fn cells(&self) -> usize {
        self.settings.len() * self.optimizers.len() * self.seeds.len()
    }
}

/// The run configuration of one cell. The base optimizer block is used
/// when its kind matches; otherwise the toy defaults for `kind` apply.
pub fn cell_config(base: &RunConfig, setting: NormSetting, kind: OptimizerKind, seed: u64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.model.setting = setting;
    if cfg.optim.kind != kind {
        cfg.optim = crate::defaults::hyper(kind);
    }
    cfg.seed = seed;
    cfg
}

pub struct Cell {
    pub setting: NormSetting,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub outcome: Result<RunReport>,
}

impl Cell {
    /// The finished report, or the partial one of a diverged run.
    pub fn report(&self) -> Option<&RunReport> {
        match &self.outcome {
            Ok(r) => Some(r),
            Err(HarnessError::Diverged { report, .. }) => Some(report),
            Err(_) => None,
        }
    }

    pub fn summary(&self) -> CellSummary {
        let (status, r) = match &self.outcome {
            Ok(r) => ("ok".to_string(), Some(r)),
            Err(e @ HarnessError::Diverged { report, .. }) => (e.to_string(), Some(&**report)),
            Err(e) => (format!("error: {e}"), None),
        };
        let ok = self.outcome.is_ok();
        CellSummary {
            setting: self.setting.to_string(),
            optimizer: self.optimizer.to_string(),
            seed: self.seed,
            status,
            initial_loss: r.map(|r| r.initial_loss),
            final_loss: r.filter(|_| ok).map(|r| r.final_loss),
            loss_floor: r.map(|r| r.loss_floor),
            median_tail_ratio: r.and_then(RunReport::median_tail_ratio),
            median_kurtosis: r.and_then(RunReport::median_kurtosis),
            wall_clock_secs: r.map(|r| r.wall_clock_secs),
        }
    }
}

/// Change from the first listed setting to another setting, with optimizer
/// and seed held fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub optimizer: String,
    pub seed: u64,
    pub baseline: String,
    pub setting: String,
    pub d_final_loss: Option<f64>,
    pub median_d_kurtosis: Option<f64>,
    pub median_d_tail_ratio: Option<f64>,
    pub median_d_condition: Option<f64>,
}

pub const DELTA_HEADER: [&str; 8] = [
    "optimizer",
    "seed",
    "baseline",
    "setting",
    "d_final_loss",
    "median_d_kurtosis",
    "median_d_tail_ratio",
    "median_d_condition",
];

pub struct GridReport {
    pub cells: Vec<Cell>,
    pub deltas: Vec<DeltaRow>,
}

impl GridReport {
    pub fn failed(&self) -> usize {
        self.cells.iter().filter(|c| c.outcome.is_err()).count()
    }

    pub fn find(&self, setting: NormSetting, optimizer: OptimizerKind, seed: u64) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.setting == setting && c.optimizer == optimizer && c.seed == seed)
    }

    pub fn summaries(&self) -> Vec<CellSummary> {
        self.cells.iter().map(Cell::summary).collect()
    }

    /// Writes `ablation.csv`, `deltas.csv`, `deltas.json` and one run
    /// directory per cell under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        crate::report::write_ablation_csv(&dir.join("ablation.csv"), &self.summaries())?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let rows = self.deltas.iter().map(|d| {
            vec![
                d.optimizer.clone(),
                d.seed.to_string(),
                d.baseline.clone(),
                d.setting.clone(),
                opt(d.d_final_loss),
                opt(d.median_d_kurtosis),
                opt(d.median_d_tail_ratio),
                opt(d.median_d_condition),
            ]
        });
        write_rows(&dir.join("deltas.csv"), &DELTA_HEADER, rows)?;
        write_json(&dir.join("deltas.json"), &self.deltas)?;
        for c in &self.cells {
            if let Some(r) = c.report() {
                write_run_dir(&dir.join(format!("{}_{}_seed{}", c.setting, c.optimizer, c.seed)), r)?;
            }
        }
        Ok(())
    }
}

/// Runs every cell. A failed cell is recorded in its slot and the rest of
/// the grid still runs.
pub fn run_grid(base: &RunConfig, grid: &Grid) -> Result<GridReport> {
    if grid.cells() == 0 {
        return Err(HarnessError::Config("ablation grid is empty".into()));
    }
    let mut plan = Vec::with_capacity(grid.cells());
    for &seed in &grid.seeds {
        for &setting in &grid.settings {
            for &kind in &grid.optimizers {
                let cfg = cell_config(base, setting, kind, seed);
                cfg.validate()?;
                plan.push((setting, kind, seed, cfg));
            }
        }
    }

    // one corpus per data seed, shared by all cells that use it
    let mut datasets: Vec<(u64, Dataset)> = Vec::new();
    for (_, _, _, cfg) in &plan {
        if !datasets.iter().any(|(s, _)| *s == cfg.data_seed()) {
            datasets.push((cfg.data_seed(), Dataset::build(cfg)?));
        }
    }
    let data_for = |cfg: &RunConfig| &datasets.iter().find(|(s, _)| *s == cfg.data_seed()).expect("built").1;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunReport>>>> = Mutex::new((0..plan.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..grid.jobs.clamp(1, plan.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((.., cfg)) = plan.get(i) else { break };
                let outcome = train_on(cfg, data_for(cfg)).map(|o| o.report);
                results.lock().expect("no worker panicked")[i] = Some(outcome);
            });
        }
    });

    let cells: Vec<Cell> = plan
        .into_iter()
        .zip(results.into_inner().expect("no worker panicked"))
        .map(|((setting, optimizer, seed, _), outcome)| Cell {
            setting,
            optimizer,
            seed,
            outcome: outcome.expect("every cell ran"),
        })
        .collect();
    let deltas = deltas(&cells, grid)?;
    Ok(GridReport { cells, deltas })
}

fn deltas(cells: &[Cell], grid: &Grid) -> Result<Vec<DeltaRow>> {
    let Some(&baseline) = grid.settings.first() else {
        return Ok(Vec::new());
    };
    let find = |s, o, seed| {
        cells
            .iter()
            .find(|c| c.setting == s && c.optimizer == o && c.seed == seed)
            .and_then(|c| c.outcome.as_ref().ok())
    };
    let mut rows = Vec::new();
    for &kind in &grid.optimizers {
        for &seed in &grid.seeds {
            let Some(base) = find(baseline, kind, seed) else { continue };
            for &setting in grid.settings.iter().skip(1) {
                let Some(other) = find(setting, kind, seed) else { continue };
                let cmp = compare_runs(&base.diagnostics, &other.diagnostics)?;
                rows.push(DeltaRow {
                    optimizer: kind.to_string(),
                    seed,
                    baseline: baseline.to_string(),
                    setting: setting.to_string(),
                    d_final_loss: Some(other.final_loss - base.final_loss),
                    median_d_kurtosis: cmp.median_d_kurtosis,
                    median_d_tail_ratio: cmp.median_d_tail_ratio,
                    median_d_condition: cmp.median_d_condition,
                });
            }
        }
    }
    Ok(rows)
}
