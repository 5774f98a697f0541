//! Checkpoints: a directory of HCT1 tensors plus `index.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::OptimState;
use super::{TrainConfig, TrainError, TrainState};
use crate::diffcore::{io as tio, Float, Tensor};
use crate::encoders::ParamStore;
use crate::momentum::{MomentumParams, MomentumQueue};

pub const INDEX: &str = "index.json";
const FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct QueueMeta {
    capacity: usize,
    dim: usize,
    write_head: usize,
    valid_count: usize,
}

/// Progress information stored next to the state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Best validation mean Recall seen so far.
    pub best_mr: Option<f64>,
    /// Completed epochs.
    pub epochs_done: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    format: u32,
    dtype: String,
    step: u64,
    total_steps: u64,
    shadow_steps: u64,
    optim_step: u64,
    config: TrainConfig,
    rng: ChaCha8Rng,
    queue_v: QueueMeta,
    queue_t: QueueMeta,
    meta: CheckpointMeta,
    params: Vec<String>,
    shadow: Vec<String>,
}

fn save_store<T: Float>(store: &ParamStore<T>, dir: &Path) -> Result<(), TrainError> {
    fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
    for (name, t) in store.iter() {
        tio::save(t, &dir.join(format!("{name}.hct")))?;
    }
    Ok(())
}

fn load_store<T: Float>(names: &[String], dir: &Path) -> Result<ParamStore<T>, TrainError> {
    let mut map = BTreeMap::new();
    for name in names {
        map.insert(name.clone(), tio::load::<T>(&dir.join(format!("{name}.hct")))?);
    }
    Ok(ParamStore::from_map(map))
}

fn queue_meta(q: &MomentumQueue) -> QueueMeta {
    QueueMeta { capacity: q.capacity(), dim: q.dim(), write_head: q.write_head(), valid_count: q.valid_count() }
}

/// Writes `state` to `dir`, replacing any previous checkpoint there.
pub fn save_checkpoint<T: Float>(state: &TrainState<T>, meta: &CheckpointMeta, dir: &Path) -> Result<(), TrainError> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
    save_store(&state.params, &dir.join("online"))?;
    save_store(&state.shadow.params, &dir.join("shadow"))?;
    save_store(&state.optim.m, &dir.join("adam_m"))?;
    save_store(&state.optim.v, &dir.join("adam_v"))?;
    for (name, q) in [("queue_v", &state.queue_v), ("queue_t", &state.queue_t)] {
        let t = Tensor::new(vec![q.capacity(), q.dim()], q.storage().to_vec())?;
        tio::save(&t, &dir.join(format!("{name}.hct")))?;
    }
    let index = Index {
        format: FORMAT,
        dtype: T::DTYPE.name().to_string(),
        step: state.step,
        total_steps: state.total_steps,
        shadow_steps: state.shadow.steps,
        optim_step: state.optim.step,
        config: state.config.clone(),
        rng: state.rng.clone(),
        queue_v: queue_meta(&state.queue_v),
        queue_t: queue_meta(&state.queue_t),
        meta: meta.clone(),
        params: state.params.names().map(str::to_string).collect(),
        shadow: state.shadow.params.names().map(str::to_string).collect(),
    };
    let path = dir.join(INDEX);
    let text = serde_json::to_string_pretty(&index).expect("index serialises");
    fs::write(&path, text).map_err(|e| TrainError::io(&path, e))
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint<T: Float>(dir: &Path) -> Result<(TrainState<T>, CheckpointMeta), TrainError> {
    let path = dir.join(INDEX);
    let text = fs::read_to_string(&path).map_err(|e| TrainError::io(&path, e))?;
    let index: Index = serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
    if index.format != FORMAT {
        return Err(TrainError::Checkpoint(format!("unsupported checkpoint format {}", index.format)));
    }
    if index.dtype != T::DTYPE.name() {
        return Err(TrainError::Checkpoint(format!("checkpoint holds {} tensors, expected {}", index.dtype, T::DTYPE.name())));
    }
    let params = load_store::<T>(&index.params, &dir.join("online"))?;
    let shadow = load_store::<T>(&index.shadow, &dir.join("shadow"))?;
    let m = load_store::<T>(&index.params, &dir.join("adam_m"))?;
    let v = load_store::<T>(&index.params, &dir.join("adam_v"))?;
    let queue = |name: &str, meta: QueueMeta| -> Result<MomentumQueue, TrainError> {
        let t = tio::load::<f64>(&dir.join(format!("{name}.hct")))?;
        Ok(MomentumQueue::from_parts(meta.capacity, meta.dim, t.into_data(), meta.write_head, meta.valid_count)?)
    };
    let optim = OptimState {
        config: super::optim::AdamWConfig { weight_decay: index.config.weight_decay, ..Default::default() },
        step: index.optim_step,
        m,
        v,
    };
    let state = TrainState {
        params,
        shadow: MomentumParams { params: shadow, steps: index.shadow_steps },
        optim,
        queue_v: queue("queue_v", index.queue_v)?,
        queue_t: queue("queue_t", index.queue_t)?,
        rng: index.rng,
        step: index.step,
        total_steps: index.total_steps,
        config: index.config,
    };
    Ok((state, index.meta))
}

/// Just the online parameters and model configuration of a checkpoint.
pub fn load_params<T: Float>(dir: &Path) -> Result<(ParamStore<T>, TrainConfig), TrainError> {
    let (state, _) = load_checkpoint::<T>(dir)?;
    Ok((state.params, state.config))
}
