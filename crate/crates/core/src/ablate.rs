//! The component ablation grid: every toggle combination trained over
//! several seeds, evaluated on the test and held-out splits.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, split_records, GenConfig, SceneRecord, Split};
use crate::encoders::Vocab;
use crate::eval::{evaluate, RetrievalReport};
use crate::losses::Toggles;
use crate::train::{fit, load_params, TrainConfig, TrainError};

const fn t(mc: bool, md: bool, rg_itc: bool, rg_itm: bool) -> Toggles {
    Toggles { mc, md, rg_itc, rg_itm }
}

/// The eight component rows, numbered from 1 in reports.
pub const GRID: [Toggles; 8] = [
    t(false, false, false, false),
    t(true, false, false, false),
    t(true, true, false, false),
    t(false, false, true, false),
    t(false, false, true, true),
    t(true, true, true, false),
    t(true, true, false, true),
    t(true, true, true, true),
];

pub const REPORT_FILE: &str = "ablation.json";
pub const CELL_FILE: &str = "cell.json";

/// Seed used by every row for seed index `i`, so rows are compared on paired
/// initialisations and batch orders.
pub fn cell_seed(base: u64, i: usize) -> u64 {
    derive_seed(base, 0xAB1A, i as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub row: usize,
    pub label: String,
    pub toggles: Toggles,
    pub seed_index: usize,
    pub seed: u64,
    pub steps: u64,
    pub seconds: f64,
    pub test: RetrievalReport,
    pub heldout: Option<RetrievalReport>,
}

/// Means over seeds for one grid row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub row: usize,
    pub label: String,
    pub toggles: Toggles,
    pub seeds: usize,
    /// R@1, R@5, R@10 with images as queries.
    pub image_query: [f64; 3],
    /// R@1, R@5, R@10 with captions as queries.
    pub text_query: [f64; 3],
    pub mr: f64,
    pub heldout_mr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub row: usize,
    pub seed_index: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dataset: Option<GenConfig>,
    pub train_scenes: usize,
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    /// Wall-clock seconds for the cells run by this invocation plus the
    /// recorded seconds of cells reused from an earlier one.
    pub total_seconds: f64,
    pub cells: Vec<CellResult>,
    pub rows: Vec<RowSummary>,
    pub failures: Vec<CellFailure>,
}

impl AblationReport {
    pub fn row(&self, row: usize) -> Option<&RowSummary> {
        self.rows.iter().find(|r| r.row == row)
    }
}

#[derive(Clone, Debug)]
pub struct AblationPlan {
    /// Grid rows to train, numbered from 1.
    pub rows: Vec<usize>,
    pub seeds: usize,
    pub jobs: usize,
}

impl Default for AblationPlan {
    fn default() -> Self {
        AblationPlan { rows: (1..=GRID.len()).collect(), seeds: 3, jobs: 1 }
    }
}

fn cell_dir(out: &Path, row: usize, seed_index: usize) -> PathBuf {
    out.join(format!("row{row}_seed{seed_index}"))
}

fn run_cell(
    records: &[SceneRecord],
    base: &TrainConfig,
    out: &Path,
    row: usize,
    seed_index: usize,
) -> Result<CellResult, TrainError> {
    let dir = cell_dir(out, row, seed_index);
    let toggles = GRID[row - 1];
    let seed = cell_seed(base.seed, seed_index);
    let cached = dir.join(CELL_FILE);
    if let Ok(text) = fs::read_to_string(&cached) {
        if let Ok(cell) = serde_json::from_str::<CellResult>(&text) {
            if cell.seed == seed && cell.toggles == toggles {
                return Ok(cell);
            }
        }
    }
    let mut config = base.clone();
    config.toggles = toggles;
    config.seed = seed;
    config.validate()?;
    let start = Instant::now();
    let summary = fit(config.clone(), records, &dir, false)?;
    let (params, _) = load_params::<f32>(&summary.best_dir)?;
    let vocab = Vocab::builtin();
    let test = evaluate(&split_records(records, Split::Test), &params, &config.model, &vocab, 0)?;
    let heldout_recs = split_records(records, Split::Heldout);
    let heldout = if heldout_recs.is_empty() {
        None
    } else {
        Some(evaluate(&heldout_recs, &params, &config.model, &vocab, 0)?)
    };
    let cell = CellResult {
        row,
        label: toggles.label(),
        toggles,
        seed_index,
        seed,
        steps: summary.steps,
        seconds: start.elapsed().as_secs_f64(),
        test,
        heldout,
    };
    fs::write(&cached, serde_json::to_string_pretty(&cell).expect("cell serialises"))
        .map_err(|e| TrainError::Io { path: cached.clone(), source: e })?;
    Ok(cell)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Averages completed cells per row.
pub fn summarize(cells: &[CellResult]) -> Vec<RowSummary> {
    let mut rows: Vec<usize> = cells.iter().map(|c| c.row).collect();
    rows.sort_unstable();
    rows.dedup();
    rows.into_iter()
        .map(|row| {
            let cs: Vec<&CellResult> = cells.iter().filter(|c| c.row == row).collect();
            let iq = |f: fn(&RetrievalReport) -> f64| mean(cs.iter().map(|c| f(&c.test)));
            let heldout: Vec<f64> = cs.iter().filter_map(|c| c.heldout.as_ref().map(|h| h.mr)).collect();
            RowSummary {
                row,
                label: cs[0].label.clone(),
                toggles: cs[0].toggles,
                seeds: cs.len(),
                image_query: [iq(|r| r.image_query.r1), iq(|r| r.image_query.r5), iq(|r| r.image_query.r10)],
                text_query: [iq(|r| r.text_query.r1), iq(|r| r.text_query.r5), iq(|r| r.text_query.r10)],
                mr: iq(|r| r.mr),
                heldout_mr: (heldout.len() == cs.len()).then(|| mean(heldout.into_iter())),
            }
        })
        .collect()
}

/// Trains and evaluates every (row, seed) cell of `plan`, `plan.jobs` cells
/// at a time. Cells whose `cell.json` already exists under `out` are reused.
/// Failed cells are listed in the report rather than aborting the sweep.
pub fn run_ablation(
    records: &[SceneRecord],
    dataset: Option<GenConfig>,
    base: &TrainConfig,
    plan: &AblationPlan,
    out: &Path,
) -> Result<AblationReport, TrainError> {
    base.validate()?;
    if plan.seeds == 0 || plan.rows.is_empty() {
        return Err(TrainError::Config("ablation needs at least one row and one seed".into()));
    }
    if let Some(&bad) = plan.rows.iter().find(|&&r| r == 0 || r > GRID.len()) {
        return Err(TrainError::Config(format!("grid row {bad} is outside 1..={}", GRID.len())));
    }
    fs::create_dir_all(out).map_err(|e| TrainError::Io { path: out.to_path_buf(), source: e })?;
    // seed-major, so every row has a first result early in a long sweep
    let jobs: Vec<(usize, usize)> =
        (0..plan.seeds).flat_map(|s| plan.rows.iter().map(move |&r| (r, s))).collect();
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::new());
    let start = Instant::now();
    std::thread::scope(|scope| {
        for _ in 0..plan.jobs.clamp(1, jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(row, s)) = jobs.get(i) else { break };
                let began = Instant::now();
                let r = run_cell(records, base, out, row, s);
                let fresh = began.elapsed().as_secs_f64();
                results.lock().expect("no worker panicked").push((i, r, fresh));
            });
        }
    });
    let mut results = results.into_inner().expect("no worker panicked");
    results.sort_by_key(|(i, _, _)| *i);
    let (mut cells, mut failures) = (Vec::new(), Vec::new());
    let mut reused_seconds = 0.0;
    for (i, r, fresh) in results {
        match r {
            Ok(c) => {
                if c.seconds > fresh + 1.0 {
                    reused_seconds += c.seconds;
                }
                cells.push(c);
            }
            Err(e) => failures.push(CellFailure { row: jobs[i].0, seed_index: jobs[i].1, error: e.to_string() }),
        }
    }
    let report = AblationReport {
        dataset,
        train_scenes: split_records(records, Split::Train).len(),
        base: base.clone(),
        seeds: (0..plan.seeds).map(|i| cell_seed(base.seed, i)).collect(),
        jobs: plan.jobs.max(1),
        total_seconds: start.elapsed().as_secs_f64() + reused_seconds,
        rows: summarize(&cells),
        cells,
        failures,
    };
    let path = out.join(REPORT_FILE);
    fs::write(&path, serde_json::to_string_pretty(&report).expect("report serialises"))
        .map_err(|e| TrainError::Io { path, source: e })?;
    Ok(report)
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>3}  {:<22} {:>6} {:>6} {:>6}  {:>6} {:>6} {:>6}  {:>6} {:>8}",
            "row", "components", "i2t@1", "i2t@5", "i2t@10", "t2i@1", "t2i@5", "t2i@10", "mR", "held mR"
        )?;
        for r in &self.rows {
            let held = r.heldout_mr.map(|m| format!("{m:.2}")).unwrap_or_else(|| "-".into());
            writeln!(
                f,
                "{:>3}  {:<22} {:>6.2} {:>6.2} {:>6.2}  {:>6.2} {:>6.2} {:>6.2}  {:>6.2} {:>8}",
                r.row,
                r.label,
                r.image_query[0],
                r.image_query[1],
                r.image_query[2],
                r.text_query[0],
                r.text_query[1],
                r.text_query[2],
                r.mr,
                held
            )?;
        }
        for fail in &self.failures {
            writeln!(f, "row {} seed {} failed: {}", fail.row, fail.seed_index, fail.error)?;
        }
        write!(f, "{} seeds, {:.0} s", self.seeds.len(), self.total_seconds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rows_are_distinct_and_bracketed() {
        let labels: std::collections::BTreeSet<String> = GRID.iter().map(|t| t.label()).collect();
        assert_eq!(labels.len(), 8);
        assert_eq!(GRID[0], Toggles::NONE);
        assert_eq!(GRID[7], Toggles::default());
        assert_eq!(GRID[6].label(), "MC+MD+RG-ITM");
    }

    #[test]
    fn seeds_depend_only_on_index() {
        assert_eq!(cell_seed(7, 2), cell_seed(7, 2));
        assert_ne!(cell_seed(7, 1), cell_seed(7, 2));
        assert_ne!(cell_seed(7, 1), cell_seed(8, 1));
    }
}
