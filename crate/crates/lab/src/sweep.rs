use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{expand_sweep, RunConfig};
use crate::error::{LabError, Result};
use crate::train::{run_training, RunResult};

/// Worker count from `SFL_THREADS`, defaulting to the available cores.
pub fn threads_from_env() -> usize {
    std::env::var("SFL_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs every config as an independent job on a pool of
/// [`threads_from_env`] workers. Results keep the input order.
pub fn run_many(cfgs: &[RunConfig], out_dir: Option<&Path>) -> Result<Vec<RunResult>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads_from_env())
        .build()
        .map_err(|e| LabError::Config(format!("thread pool: {e}")))?;
    pool.install(|| cfgs.par_iter().map(|c| run_training(c, out_dir)).collect())
}

pub fn run_sweep(base: &RunConfig, out_dir: Option<&Path>) -> Result<Vec<RunResult>> {
    run_many(&expand_sweep(base)?, out_dir)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrPoint {
    pub lr: f64,
    pub final_loss: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSweepReport {
    pub table: Vec<LrPoint>,
    pub best_lr: f64,
    pub best_loss: f64,
}

/// Picks the LR with the lowest final loss among runs that did not diverge.
pub fn best_of(table: Vec<LrPoint>) -> Result<LrSweepReport> {
    let best = table
        .iter()
        .filter(|p| !p.diverged && p.final_loss.is_finite())
        .min_by(|a, b| a.final_loss.total_cmp(&b.final_loss))
        .cloned()
        .ok_or(LabError::SweepFailed)?;
    Ok(LrSweepReport {
        best_lr: best.lr,
        best_loss: best.final_loss,
        table,
    })
}

/// Runs the config's LR grid (sqrt(2) steps) and reports the argmin.
pub fn lr_sweep(base: &RunConfig, out_dir: Option<&Path>) -> Result<LrSweepReport> {
    if base.sweep.lr_grid.is_none() {
        return Err(LabError::Config("lr_sweep needs sweep.lr_grid".into()));
    }
    let runs = run_sweep(base, out_dir)?;
    best_of(
        runs.iter()
            .map(|r| LrPoint {
                lr: r.config.schedule.peak_lr,
                final_loss: r.final_loss,
                diverged: r.diverged(),
            })
            .collect(),
    )
}
