//! Dependency-ordered, resumable grid execution.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use thiserror::Error;

use super::plan::{Cell, GridPlan, PlanError};
use super::results::{read_results, write_results, ResultsError, TreatmentResult};
use super::{run_treatment, ExperimentConfig, ExperimentError, SplitData, Treatment};
use crate::datasplit::Side;
use crate::surgery::{self, Checkpoint};

pub const RESULTS_FILE: &str = "results.csv";

#[derive(Debug, Error)]
pub enum GridError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Results(#[from] ResultsError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("no cell of the plan matches the row: {0}")]
    UnknownCell(String),
    #[error("provenance mismatch: {0}")]
    Provenance(String),
    #[error(transparent)]
    Cell(#[from] ExperimentError),
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Clone, Debug)]
pub struct GridOptions {
    /// Keep rows already in the results file when their provenance matches.
    pub resume: bool,
    pub workers: usize,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            resume: true,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GridSummary {
    /// Rows in plan order.
    pub results: Vec<TreatmentResult>,
    pub executed: usize,
    pub skipped: usize,
    /// `(cell, error)` for every failed cell.
    pub failures: Vec<(String, String)>,
}

type Key = (String, &'static str, usize, String, bool, u64);

fn key_of(row: &TreatmentResult) -> Key {
    (
        row.split.clone(),
        row.treatment.as_str(),
        row.n,
        row.direction.clone(),
        row.finetune,
        row.seed,
    )
}

fn cell_key(cell: &Cell, config: &ExperimentConfig) -> Key {
    let t = &cell.treatment;
    let finetune = match t {
        Treatment::RandomFirstN { .. } => config.train_random,
        _ => t.finetune(),
    };
    (
        cell.split.clone(),
        t.kind().as_str(),
        t.n(),
        t.direction(),
        finetune,
        cell.seed,
    )
}

fn base_path(out_dir: &Path, split: &str, side: Side, seed: u64) -> PathBuf {
    out_dir
        .join("checkpoints")
        .join(split)
        .join(format!("base-{side}-s{seed}.tflb"))
}

struct Store<'a> {
    path: PathBuf,
    order: &'a [Cell],
    config: &'a ExperimentConfig,
    rows: Mutex<BTreeMap<usize, TreatmentResult>>,
}

impl Store<'_> {
    fn insert(&self, index: usize, row: TreatmentResult) -> Result<(), ResultsError> {
        let mut rows = self.rows.lock().expect("results lock");
        rows.insert(index, row);
        let ordered: Vec<TreatmentResult> = rows.values().cloned().collect();
        write_results(&self.path, &ordered)
    }

    fn existing(&self, index: usize) -> Option<TreatmentResult> {
        self.rows.lock().expect("results lock").get(&index).cloned()
    }

    fn matches(&self, index: usize, split: &SplitData, base_hash: Option<&str>) -> bool {
        let cell = &self.order[index];
        self.existing(index).is_some_and(|row| {
            row.config_hash == self.config.cell_hash(split, &cell.treatment, cell.seed)
                && base_hash.is_none_or(|h| row.base_ckpt_hash == h)
        })
    }
}

/// Runs every cell of `plan` under `out_dir`: bases first, then the cells
/// that depend on them. Results are rewritten atomically after each cell, so
/// an interrupted grid resumes where it stopped. A failing cell is recorded
/// and the grid continues.
pub fn run_grid(plan: &GridPlan, out_dir: &Path, options: &GridOptions) -> Result<GridSummary, GridError> {
    let (config, splits) = plan.prepare()?;
    let cells = plan.cells();
    let results_path = out_dir.join(RESULTS_FILE);

    for split in &splits {
        let path = out_dir.join("splits").join(format!("{}.csv", split.id));
        crate::io_util::write_atomic(&path, split.split.to_manifest().as_bytes())
            .map_err(|source| GridError::Io {
                path: path.display().to_string(),
                source,
            })?;
    }

    let mut prior = BTreeMap::new();
    if options.resume && results_path.exists() {
        let by_key: BTreeMap<Key, TreatmentResult> = read_results(&results_path)?
            .into_iter()
            .map(|r| (key_of(&r), r))
            .collect();
        for (i, cell) in cells.iter().enumerate() {
            if let Some(row) = by_key.get(&cell_key(cell, &config)) {
                prior.insert(i, row.clone());
            }
        }
    }
    let store = Store {
        path: results_path,
        order: &cells,
        config: &config,
        rows: Mutex::new(prior),
    };
    let split_of = |id: &str| splits.iter().find(|s| s.id == id).expect("plan split");
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers.max(1))
        .build()
        .map_err(|e| GridError::Pool(e.to_string()))?;

    let executed = Mutex::new(0usize);
    let failures = Mutex::new(Vec::new());
    let fail = |cell: &Cell, err: String| {
        log::warn!("cell {} failed: {err}", cell.slug());
        failures.lock().expect("failure lock").push((cell.slug(), err));
    };
    let record = |index: usize, cell: &Cell, out: super::CellOutput| -> Result<(), GridError> {
        let trace = out_dir.join("traces").join(format!("{}.csv", cell.slug()));
        out.trace.write_csv(&trace).map_err(|source| GridError::Io {
            path: trace.display().to_string(),
            source,
        })?;
        log::info!("{} top1={}", cell.slug(), out.result.top1_accuracy);
        store.insert(index, out.result)?;
        *executed.lock().expect("count lock") += 1;
        Ok(())
    };

    let (base_cells, dependents): (Vec<usize>, Vec<usize>) = (0..cells.len())
        .partition(|&i| matches!(cells[i].treatment, Treatment::Base { .. }));

    let bases: Mutex<BTreeMap<(String, Side, u64), Checkpoint>> = Mutex::new(BTreeMap::new());
    pool.install(|| {
        base_cells.par_iter().for_each(|&i| {
            let cell = &cells[i];
            let side = cell.treatment.target();
            let split = split_of(&cell.split);
            let path = base_path(out_dir, &cell.split, side, cell.seed);
            if let Some(row) = store.existing(i) {
                if store.matches(i, split, None) {
                    if let Ok(ckpt) = surgery::load(&path) {
                        if ckpt.content_hash() == row.base_ckpt_hash {
                            bases.lock().expect("base lock").insert((cell.split.clone(), side, cell.seed), ckpt);
                            return;
                        }
                    }
                }
            }
            let outcome = run_treatment(&cell.treatment, cell.seed, split, None, &config)
                .map_err(GridError::from)
                .and_then(|out| {
                    surgery::save(&out.checkpoint, &path).map_err(|e| GridError::Io {
                        path: path.display().to_string(),
                        source: std::io::Error::other(e.to_string()),
                    })?;
                    let ckpt = out.checkpoint.clone();
                    record(i, cell, out)?;
                    Ok(ckpt)
                });
            match outcome {
                Ok(ckpt) => {
                    bases.lock().expect("base lock").insert((cell.split.clone(), side, cell.seed), ckpt);
                }
                Err(e) => fail(cell, e.to_string()),
            }
        });
    });
    let bases = bases.into_inner().expect("base lock");

    pool.install(|| {
        dependents.par_iter().for_each(|&i| {
            let cell = &cells[i];
            let split = split_of(&cell.split);
            let base = cell
                .treatment
                .base_side()
                .map(|side| bases.get(&(cell.split.clone(), side, cell.seed)));
            let base = match base {
                Some(None) => {
                    let side = cell.treatment.base_side().expect("dependent");
                    fail(cell, format!("dependency: base {side} seed {} is unavailable", cell.seed));
                    return;
                }
                Some(Some(ckpt)) => Some(ckpt),
                None => None,
            };
            let base_hash = base.map(|b| b.content_hash());
            if store.matches(i, split, Some(base_hash.as_deref().unwrap_or(""))) {
                return;
            }
            let outcome = run_treatment(&cell.treatment, cell.seed, split, base, &config)
                .map_err(GridError::from)
                .and_then(|out| record(i, cell, out));
            if let Err(e) = outcome {
                fail(cell, e.to_string());
            }
        });
    });

    let rows = store.rows.into_inner().expect("results lock");
    // keep only rows that belong to this plan, in plan order
    write_results(&out_dir.join(RESULTS_FILE), &rows.values().cloned().collect::<Vec<_>>())?;
    let executed = executed.into_inner().expect("count lock");
    let mut failures = failures.into_inner().expect("failure lock");
    failures.sort();
    Ok(GridSummary {
        skipped: rows.len() - executed,
        results: rows.into_values().collect(),
        executed,
        failures,
    })
}

/// Re-runs the cell behind `row` from the plan and the base checkpoint stored
/// under `out_dir`, checking every recorded hash, and returns the new row.
pub fn reproduce_cell(plan: &GridPlan, out_dir: &Path, row: &TreatmentResult) -> Result<TreatmentResult, GridError> {
    let (config, splits) = plan.prepare()?;
    let cell = plan
        .cells()
        .into_iter()
        .find(|c| cell_key(c, &config) == key_of(row))
        .ok_or_else(|| GridError::UnknownCell(format!("{row:?}")))?;
    let split = splits
        .iter()
        .find(|s| s.id == cell.split)
        .expect("plan split");
    let expected = config.cell_hash(split, &cell.treatment, cell.seed);
    if expected != row.config_hash {
        return Err(GridError::Provenance(format!(
            "config hash {} recorded, plan gives {expected}",
            row.config_hash
        )));
    }
    let base = match cell.treatment.base_side() {
        Some(side) => {
            let path = base_path(out_dir, &cell.split, side, cell.seed);
            let ckpt = surgery::load(&path).map_err(|e| GridError::Provenance(e.to_string()))?;
            if ckpt.content_hash() != row.base_ckpt_hash {
                return Err(GridError::Provenance(format!(
                    "base checkpoint {} hashes to {}, row recorded {}",
                    path.display(),
                    ckpt.content_hash(),
                    row.base_ckpt_hash
                )));
            }
            Some(ckpt)
        }
        None => None,
    };
    let out = run_treatment(&cell.treatment, cell.seed, split, base.as_ref(), &config)?;
    Ok(out.result)
}
