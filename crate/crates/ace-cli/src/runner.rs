//! Parallel execution of the one-vs-all experiment grid.
//!
//! Cells are independent (each trains from its own seed), so they run on a
//! thread pool. Results are collected in grid order, which keeps every
//! artifact byte-identical to a serial run.

use ace_core::harness::{
    experiment_cells, run_experiment, CellFailure, CellHistory, CellSummary, ExperimentConfig,
    OneVsAllOutcome, RunReport,
};
use ace_core::Dataset;
use anyhow::{bail, Context, Result};
use rayon::prelude::*;

/// Runs every (class, seed) cell of the grid, using `jobs` worker threads
/// (or rayon's default when `None`). Failed cells are recorded and skipped;
/// the call errors only when no cell succeeds.
pub fn run_grid(
    config: &ExperimentConfig,
    dataset: &Dataset,
    jobs: Option<usize>,
) -> Result<OneVsAllOutcome> {
    let cells = experiment_cells(config, dataset).context("planning experiment grid")?;
    let results: Vec<(usize, u64, ace_core::Result<ace_core::ExperimentOutcome>)> = match jobs {
        Some(n) => {
            if n == 0 {
                bail!("--jobs must be at least 1");
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .context("building worker thread pool")?;
            pool.install(|| run_cells(config, dataset, &cells))
        }
        None => run_cells(config, dataset, &cells),
    };

    let mut summaries = Vec::new();
    let mut histories = Vec::new();
    let mut failures = Vec::new();
    for (k_ind, seed, result) in results {
        match result {
            Ok(outcome) => {
                summaries.push(CellSummary {
                    k_ind,
                    seed,
                    auc: outcome.auc,
                    concept_acc: outcome.concept_acc,
                });
                histories.push(CellHistory {
                    k_ind,
                    seed,
                    records: outcome.history,
                });
            }
            Err(err) => failures.push(CellFailure {
                k_ind,
                seed,
                message: err.to_string(),
            }),
        }
    }
    if summaries.is_empty() {
        let first = failures.first().expect("grid is never empty");
        bail!(
            "all {} cells failed; first failure (k_ind {}, seed {}): {}",
            failures.len(),
            first.k_ind,
            first.seed,
            first.message
        );
    }
    let report =
        RunReport::aggregate(config.clone(), summaries).context("aggregating cell results")?;
    Ok(OneVsAllOutcome {
        report,
        histories,
        failures,
    })
}

fn run_cells(
    config: &ExperimentConfig,
    dataset: &Dataset,
    cells: &[(usize, u64)],
) -> Vec<(usize, u64, ace_core::Result<ace_core::ExperimentOutcome>)> {
    cells
        .par_iter()
        .map(|&(k_ind, seed)| (k_ind, seed, run_experiment(config, dataset, k_ind, seed)))
        .collect()
}
