//! Threaded evaluation of independent grid and ablation cells.
//!
//! Every cell is seeded from its own configuration, so results do not depend
//! on the worker count or on scheduling.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use amad_core::data::TimeSeries;
use amad_core::harness::{
    ablation_cell, assemble_ablation, assemble_grid, grid_cell, grid_configs, AblationResult, AblationRow, Dataset,
    GridReport, PipelineConfig,
};

use crate::error::{CliError, Result};

pub const THREADS_ENV: &str = "AMAD_THREADS";

/// Worker count for `jobs` cells: the `AMAD_THREADS` cap when set, else the
/// available parallelism.
pub fn worker_count(jobs: usize) -> Result<usize> {
    let cap = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    Ok(cap.min(jobs).max(1))
}

/// Evaluates `f(0..n)` on `workers` threads and returns results in index
/// order.
pub fn run_indexed<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if workers <= 1 || n <= 1 {
        return (0..n).map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.min(n) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i);
                slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .map(|o| o.expect("every index is claimed by exactly one worker"))
        .collect()
}

pub fn grid(
    train: &TimeSeries,
    test: &TimeSeries,
    alphas: &[f64],
    taus: &[f64],
    base: &PipelineConfig,
    workers: usize,
) -> GridReport {
    let cfgs = grid_configs(alphas, taus, base);
    let results = run_indexed(cfgs.len(), workers, |i| grid_cell(train, test, &cfgs[i].2));
    assemble_grid(alphas, taus, results)
}

pub fn ablation(
    rows: &[AblationRow],
    datasets: &[Dataset],
    base: &PipelineConfig,
    workers: usize,
) -> Vec<AblationResult> {
    let n = rows.len() * datasets.len();
    let outcomes = run_indexed(n, workers, |i| {
        ablation_cell(&rows[i / datasets.len()], &datasets[i % datasets.len()], base)
    });
    assemble_ablation(rows, datasets.len(), outcomes)
}
