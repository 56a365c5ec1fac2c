//! Runs the cross product of backends, regimes, consumer counts and knobs,
//! one result file per cell and repetition.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::harness::{run_bench, BenchConfig, HarnessError, Launcher, Regime};
use crate::metrics::{result_stem, write_result, BenchResult};
use crate::store::BackendKind;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    /// Settings shared by every cell (steps, batch size, compute time, seed,
    /// data directory, ...). Its backend, regime, consumers and knobs are
    /// overwritten per cell.
    pub base: BenchConfig,
    pub backends: Vec<BackendKind>,
    pub regimes: Vec<Regime>,
    pub consumer_counts: Vec<usize>,
    pub workers: Vec<usize>,
    pub pinned: Vec<bool>,
    /// `None` runs from the data directory, `Some` stages there first.
    pub stage_dirs: Vec<Option<PathBuf>>,
    pub repetitions: u32,
}

impl SweepSpec {
    pub fn new(base: BenchConfig) -> Self {
        Self {
            base,
            backends: BackendKind::ALL.to_vec(),
            regimes: vec![Regime::GlobalLockThreads, Regime::Processes],
            consumer_counts: vec![1, 2, 4, 8],
            workers: vec![0],
            pinned: vec![false],
            stage_dirs: vec![None],
            repetitions: 1,
        }
    }

    /// Every cell as (config, repetition, file tag), in execution order.
    pub fn expand(&self) -> Vec<SweepCell> {
        let mut cells = Vec::new();
        for &backend in &self.backends {
            for &regime in &self.regimes {
                for &consumers in &self.consumer_counts {
                    for &workers in &self.workers {
                        for &pinned in &self.pinned {
                            for stage_dir in &self.stage_dirs {
                                for repetition in 0..self.repetitions {
                                    let config = BenchConfig {
                                        backend,
                                        regime,
                                        consumers,
                                        workers,
                                        pinned,
                                        stage_dir: stage_dir.clone(),
                                        ..self.base.clone()
                                    };
                                    let tag = format!(
                                        "w{workers}-p{}-s{}-r{repetition}",
                                        u8::from(pinned),
                                        u8::from(stage_dir.is_some())
                                    );
                                    cells.push(SweepCell {
                                        config,
                                        repetition,
                                        tag,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        cells
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub config: BenchConfig,
    pub repetition: u32,
    pub tag: String,
}

impl SweepCell {
    /// File name suffix that identifies this cell in a results directory.
    pub fn file_suffix(&self) -> String {
        format!("_{}.json", result_stem(&self.config, Some(&self.tag)))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SweepSummary {
    pub ran: usize,
    pub skipped: usize,
    pub failed: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellOutcome {
    Skipped,
    Ok,
    Failed,
}

fn completed(dir: &Path) -> io::Result<Vec<String>> {
    match fs::read_dir(dir) {
        Ok(entries) => entries
            .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
            .collect(),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e),
    }
}

/// Runs every cell not already present in `results_dir`, sequentially.
/// Failed cells are recorded as failed results and count as completed.
pub fn run_sweep(
    spec: &SweepSpec,
    results_dir: &Path,
    launcher: &Launcher,
    mut progress: impl FnMut(&SweepCell, CellOutcome),
) -> Result<SweepSummary, HarnessError> {
    fs::create_dir_all(results_dir)?;
    let done = completed(results_dir)?;
    let mut summary = SweepSummary::default();
    for cell in spec.expand() {
        let suffix = cell.file_suffix();
        if done.iter().any(|name| name.ends_with(&suffix)) {
            summary.skipped += 1;
            progress(&cell, CellOutcome::Skipped);
            continue;
        }
        let result = match run_bench(&cell.config, launcher, cell.repetition) {
            Ok(r) => r,
            Err(e @ HarnessError::InvalidConfig(_)) => return Err(e),
            Err(e) => {
                let reason = if e.is_out_of_memory() { "OOM".to_owned() } else { e.to_string() };
                BenchResult::failed(cell.config.clone(), cell.repetition, reason)
            }
        };
        let outcome = if result.is_failed() {
            summary.failed += 1;
            CellOutcome::Failed
        } else {
            summary.ran += 1;
            CellOutcome::Ok
        };
        write_result(&result, results_dir, Some(&cell.tag))?;
        progress(&cell, outcome);
    }
    Ok(summary)
}
