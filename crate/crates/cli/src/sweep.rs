//! Grid sweeps over the penalty weights (λ, ν) and seeds.
//!
//! Every grid point is an independent run in its own subdirectory
//! (`l{λ}-n{ν}-s{seed}`), so points can execute concurrently; the
//! `NORMBENCH_THREADS` environment variable caps the worker count
//! (default: available parallelism). Per-run failures are recorded and do
//! not abort the rest of the grid.
//!
//! Selection follows validation loss: the winning run is the non-diverged
//! entry with the smallest final validation loss, ties broken by grid
//! order. Because candidates are compared in grid order with a strict
//! inequality, the choice cannot depend on which run finished first.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::csvlog::fmt_sig;
use crate::runner::{self, RunnerError};

#[derive(Debug, Clone)]
pub struct SweepGrid {
    pub lambdas: Vec<f64>,
    pub nus: Vec<f64>,
    pub seeds: Vec<u64>,
}

/// One grid point's outcome, as recorded in `sweep.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepEntry {
    pub lambda: f64,
    pub nu: f64,
    pub seed: u64,
    /// Subdirectory of the sweep output holding this run's artifacts.
    pub dir: String,
    pub valid_loss: Option<f64>,
    pub valid_accuracy: Option<f64>,
    pub avg_mean_tid: Option<f64>,
    pub avg_var_tid: Option<f64>,
    /// Populated when the run failed; such entries never win selection.
    pub failed: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
    /// `dir` of the winning entry, if any run survived.
    pub best: Option<String>,
}

fn thread_cap() -> usize {
    std::env::var("NORMBENCH_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn point_dir(lambda: f64, nu: f64, seed: u64) -> String {
    format!("l{}-n{}-s{}", fmt_sig(lambda, 9), fmt_sig(nu, 9), seed)
}

/// Runs the full grid under `out_dir` and writes `sweep.json` there.
pub fn sweep(
    base: &ExperimentConfig,
    grid: &SweepGrid,
    out_dir: &Path,
) -> Result<SweepReport, RunnerError> {
    if grid.lambdas.is_empty() || grid.nus.is_empty() || grid.seeds.is_empty() {
        return Err(RunnerError::Invalid("sweep grids must be non-empty".into()));
    }
    if grid.lambdas.iter().chain(&grid.nus).any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(RunnerError::Invalid("penalty weights must be finite and nonnegative".into()));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|source| RunnerError::Io { path: out_dir.display().to_string(), source })?;

    let mut points = Vec::new();
    for &l in &grid.lambdas {
        for &nu in &grid.nus {
            for &seed in &grid.seeds {
                points.push((l, nu, seed));
            }
        }
    }
    let results: Vec<Mutex<Option<SweepEntry>>> =
        points.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = thread_cap().min(points.len()).max(1);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= points.len() {
                    break;
                }
                let (lambda, nu, seed) = points[i];
                let mut cfg = base.clone();
                cfg.norm.lambda = lambda;
                cfg.norm.nu = nu;
                cfg.seed = seed;
                let dir = point_dir(lambda, nu, seed);
                let mut entry = SweepEntry {
                    lambda,
                    nu,
                    seed,
                    dir: dir.clone(),
                    valid_loss: None,
                    valid_accuracy: None,
                    avg_mean_tid: None,
                    avg_var_tid: None,
                    failed: None,
                };
                match runner::run(&cfg, &out_dir.join(&dir)) {
                    Ok(summary) => {
                        entry.valid_loss = summary.final_valid_loss;
                        entry.valid_accuracy = summary.final_valid_accuracy;
                        entry.avg_mean_tid = summary.final_tid.as_ref().map(|t| t.avg_mean_tid);
                        entry.avg_var_tid = summary.final_tid.as_ref().map(|t| t.avg_var_tid);
                    }
                    Err(e) => entry.failed = Some(e.to_string()),
                }
                *results[i].lock().unwrap() = Some(entry);
            });
        }
    });

    let entries: Vec<SweepEntry> =
        results.into_iter().map(|m| m.into_inner().unwrap().expect("worker filled slot")).collect();
    let report = SweepReport { best: select_best(&entries).map(|i| entries[i].dir.clone()), entries };
    let path = out_dir.join("sweep.json");
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(&path, text + "\n")
        .map_err(|source| RunnerError::Io { path: path.display().to_string(), source })?;
    Ok(report)
}

/// Index of the winning entry: smallest final validation loss among entries
/// that finished, first-in-grid-order on ties. `None` if nothing finished.
pub fn select_best(entries: &[SweepEntry]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, e) in entries.iter().enumerate() {
        if e.failed.is_some() {
            continue;
        }
        let Some(loss) = e.valid_loss else { continue };
        let better = match best {
            None => true,
            Some(j) => loss < entries[j].valid_loss.unwrap(),
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// The comparison table printed after a sweep.
pub fn render_table(report: &SweepReport) -> String {
    let mut out = String::new();
    out.push_str("lambda      nu          seed  valid_loss    valid_acc  mean_tid   var_tid    status\n");
    for e in &report.entries {
        let num = |x: Option<f64>| x.map_or("-".to_string(), |v| fmt_sig(v, 6));
        let status = if let Some(reason) = &e.failed {
            format!("failed: {reason}")
        } else if report.best.as_deref() == Some(e.dir.as_str()) {
            "best".to_string()
        } else {
            String::new()
        };
        out.push_str(&format!(
            "{:<11} {:<11} {:<5} {:<13} {:<10} {:<10} {:<10} {}\n",
            fmt_sig(e.lambda, 9),
            fmt_sig(e.nu, 9),
            e.seed,
            num(e.valid_loss),
            num(e.valid_accuracy),
            num(e.avg_mean_tid),
            num(e.avg_var_tid),
            status,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(lambda: f64, nu: f64, loss: Option<f64>, failed: Option<&str>) -> SweepEntry {
        SweepEntry {
            lambda,
            nu,
            seed: 0,
            dir: point_dir(lambda, nu, 0),
            valid_loss: loss,
            valid_accuracy: loss.map(|_| 0.5),
            avg_mean_tid: None,
            avg_var_tid: None,
            failed: failed.map(String::from),
        }
    }

    #[test]
    fn selection_ignores_failed_runs_and_is_order_invariant() {
        let entries = vec![
            entry(0.0, 0.0, Some(2.0), None),
            entry(0.1, 0.0, None, Some("training diverged at step 3: non-finite loss")),
            entry(0.0, 0.1, Some(1.5), None),
            entry(0.1, 0.1, Some(1.5), None),
        ];
        // The diverged entry has the semantics of "no loss"; the first of
        // the tied 1.5 losses wins regardless of completion order.
        assert_eq!(select_best(&entries), Some(2));
        let mut reversed = entries.clone();
        reversed.reverse();
        let picked = select_best(&reversed).unwrap();
        assert_eq!(reversed[picked].nu, 0.1);
        assert_eq!(reversed[picked].lambda, 0.1, "grid order decides ties, not completion");
    }

    #[test]
    fn all_failed_means_no_best() {
        let entries = vec![entry(0.0, 0.0, None, Some("boom"))];
        assert_eq!(select_best(&entries), None);
    }

    #[test]
    fn degenerate_grid_is_a_single_run() {
        let base = ExperimentConfig::from_toml(
            "[task]\ntrain_size = 32\nvalid_size = 16\n\
             [optim]\nmax_steps = 4\nbatch_size = 16\nwarmup_steps = 4\n\
             [model]\nnorm = \"bn\"\n[measure]\ncond_every = 0",
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let grid =
            SweepGrid { lambdas: vec![0.0], nus: vec![0.0], seeds: vec![0] };
        let report = sweep(&base, &grid, dir.path()).unwrap();
        assert_eq!(report.entries.len(), 1);
        assert_eq!(report.best.as_deref(), Some("l0-n0-s0"));
        assert!(dir.path().join("l0-n0-s0/train.csv").exists());
        assert!(dir.path().join("sweep.json").exists());
    }

    #[test]
    fn two_by_two_grid_runs_every_point_and_marks_one_best() {
        let base = ExperimentConfig::from_toml(
            "[task]\ntrain_size = 32\nvalid_size = 16\n\
             [optim]\nmax_steps = 4\nbatch_size = 16\nwarmup_steps = 4\n\
             [model]\nnorm = \"rbn\"\n[measure]\ncond_every = 0",
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let grid = SweepGrid { lambdas: vec![0.0, 0.1], nus: vec![0.0, 0.1], seeds: vec![3] };
        let report = sweep(&base, &grid, dir.path()).unwrap();
        assert_eq!(report.entries.len(), 4);
        assert!(report.entries.iter().all(|e| e.failed.is_none()));
        let best = report.best.as_deref().expect("a best entry");
        assert_eq!(report.entries.iter().filter(|e| e.dir == best).count(), 1);
        let text = std::fs::read_to_string(dir.path().join("sweep.json")).unwrap();
        let back: SweepReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.best, report.best);
        let table = render_table(&report);
        assert_eq!(table.matches("best").count(), 1);
    }
}
