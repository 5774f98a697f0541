//! Synthetic compositional scenes: generation, rendering, storage and
//! batching.
//!
//! A scene is a grid of coloured shapes grouped into region clusters. Each
//! region carries a box and a fragment such as "a small red circle left of a
//! large blue square"; the global caption joins the fragments and, with
//! probability `ambiguity` per fragment, drops or blurs one of them.

mod batch;
mod io;
mod render;
mod scene;

pub use batch::{assemble, epoch_batches, tokenize_trimmed, Batch};
pub use io::{read_dataset, read_gen_config, write_dataset, write_gen_config, GEN_CONFIG, IMAGE_DIR, MANIFEST};
pub use render::{object_pixels, render};
pub use scene::{
    derive_seed, generate_dataset, generate_scene, Color, Combo, GenConfig, Region, Relation, SceneObject,
    SceneRecord, ShapeKind, Size, Split, SplitSizes,
};

use std::path::{Path, PathBuf};

use crate::diffcore::DiffError;
use crate::encoders::EncoderError;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error("could not place {regions} regions without overlap after 100 retries (seed {seed})")]
    Placement { seed: u64, regions: usize },
    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },
    #[error("scene {scene_id}: image file {path} is missing")]
    MissingImage { scene_id: String, path: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] DiffError),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.to_path_buf(), source }
    }
}

/// Records of one split, in manifest order.
pub fn split_records(records: &[SceneRecord], split: Split) -> Vec<&SceneRecord> {
    records.iter().filter(|r| r.split == split).collect()
}
