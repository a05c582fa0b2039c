//! Experiment harness: synthetic corpora, training runs, ablation grids,
//! verification suites and their on-disk reports.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod defaults;
pub mod error;
pub mod report;
pub mod train;
pub mod verify;

pub use error::{HarnessError, Result};
