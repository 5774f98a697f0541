//! The epoch loop: batching, steps, logging, validation and checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use super::{TrainConfig, TrainError, TrainState};
use crate::data::{assemble, epoch_batches, split_records, SceneRecord, Split};
use crate::encoders::Vocab;
use crate::eval::{evaluate, RetrievalReport};
use crate::losses::LossBreakdown;

pub const STEP_LOG: &str = "steps.jsonl";
pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const BEST_DIR: &str = "best";
pub const LAST_DIR: &str = "last";
pub const CONFIG_FILE: &str = "config.json";

/// One line of `steps.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub itc_mcd: f64,
    pub itm: f64,
    pub rg_itc: f64,
    pub rg_itm: f64,
    #[serde(rename = "box")]
    pub box_: f64,
    pub total: f64,
    pub lr: f64,
}

impl StepLog {
    pub fn new(step: u64, b: &LossBreakdown, lr: f64) -> Self {
        StepLog { step, itc_mcd: b.itc_mcd, itm: b.itm, rg_itc: b.rg_itc, rg_itm: b.rg_itm, box_: b.box_, total: b.total, lr }
    }
}

/// One line of `epochs.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub step: u64,
    pub val: Option<RetrievalReport>,
}

#[derive(Clone, Debug)]
pub struct FitSummary {
    pub best_dir: PathBuf,
    pub last_dir: PathBuf,
    pub best_mr: Option<f64>,
    pub steps: u64,
    pub finished: bool,
}

fn append_line<S: Serialize>(path: &Path, value: &S) -> Result<(), TrainError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| TrainError::io(path, e))?;
    let line = serde_json::to_string(value).expect("log lines serialise");
    writeln!(f, "{line}").map_err(|e| TrainError::io(path, e))
}

/// Keeps the log lines whose `key` field is at most `limit`.
fn truncate_log(path: &Path, key: &str, limit: u64) -> Result<(), TrainError> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value =
            serde_json::from_str(line).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
        if v.get(key).and_then(|x| x.as_u64()).is_some_and(|s| s <= limit) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| TrainError::io(path, e))
}

/// Trains on the `train` split, validating on `val` after every epoch.
/// Writes `config.json`, `steps.jsonl`, `epochs.jsonl`, and the checkpoints
/// `last/` and `best/` (highest validation mean Recall) under `out`. With
/// `resume`, continues from `out/last`.
pub fn fit(config: TrainConfig, records: &[SceneRecord], out: &Path, resume: bool) -> Result<FitSummary, TrainError> {
    let train = split_records(records, Split::Train);
    let val = split_records(records, Split::Val);
    let vocab = Vocab::builtin();
    let steps_per_epoch = (train.len() / config.batch_size.max(1)) as u64;
    if config.epochs > 0 && steps_per_epoch == 0 {
        return Err(TrainError::Config(format!(
            "{} training records cannot fill a batch of {}",
            train.len(),
            config.batch_size
        )));
    }
    let total_steps = config.epochs as u64 * steps_per_epoch;
    let (best_dir, last_dir) = (out.join(BEST_DIR), out.join(LAST_DIR));
    let (step_log, epoch_log) = (out.join(STEP_LOG), out.join(EPOCH_LOG));

    let (mut state, mut meta) = if resume {
        let (state, meta) = load_checkpoint::<f32>(&last_dir)?;
        if state.total_steps != total_steps || state.config.batch_size != config.batch_size {
            return Err(TrainError::Config("resume config does not match the checkpoint".into()));
        }
        truncate_log(&step_log, "step", state.step)?;
        truncate_log(&epoch_log, "epoch", meta.epochs_done)?;
        let mut state = state;
        state.config.max_steps = config.max_steps;
        (state, meta)
    } else {
        fs::create_dir_all(out).map_err(|e| TrainError::io(out, e))?;
        let path = out.join(CONFIG_FILE);
        fs::write(&path, serde_json::to_string_pretty(&config).expect("config serialises"))
            .map_err(|e| TrainError::io(&path, e))?;
        for p in [&step_log, &epoch_log] {
            fs::write(p, "").map_err(|e| TrainError::io(p, e))?;
        }
        let state = TrainState::<f32>::new(config, total_steps)?;
        save_checkpoint(&state, &CheckpointMeta::default(), &best_dir)?;
        (state, CheckpointMeta::default())
    };

    let cfg = state.config.clone();
    let mut finished = state.step >= total_steps;
    while state.step < total_steps {
        if cfg.max_steps.is_some_and(|m| state.step >= m) {
            break;
        }
        let epoch = state.step / steps_per_epoch;
        let pos = (state.step % steps_per_epoch) as usize;
        let batches = epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch, true)?;
        let recs: Vec<&SceneRecord> = batches[pos].iter().map(|&i| train[i]).collect();
        let batch = assemble(&recs, &vocab, cfg.model.text_len, cfg.model.region_text_len)?;
        let lr = state.lr();
        let breakdown = state.train_step(&batch)?;
        append_line(&step_log, &StepLog::new(state.step, &breakdown, lr))?;

        if state.step % steps_per_epoch == 0 {
            meta.epochs_done = state.step / steps_per_epoch;
            let report = if val.is_empty() {
                None
            } else {
                Some(evaluate(&val, &state.params, &cfg.model, &vocab, cfg.val_rerank)?)
            };
            append_line(&epoch_log, &EpochLog { epoch: meta.epochs_done, step: state.step, val: report.clone() })?;
            let mr = report.map(|r| r.mr).unwrap_or(0.0);
            if meta.best_mr.is_none_or(|b| mr > b) {
                meta.best_mr = Some(mr);
                save_checkpoint(&state, &meta, &best_dir)?;
            }
        }
        finished = state.step >= total_steps;
    }
    save_checkpoint(&state, &meta, &last_dir)?;
    Ok(FitSummary { best_dir, last_dir, best_mr: meta.best_mr, steps: state.step, finished })
}
