//! Toy image, text and fusion encoders with their projection and task heads,
//! the tokenizer, and ROI Align region extraction.

mod image;
mod model;
mod params;
mod tokenizer;

pub use image::{bilinear, roi_align, Image, RegionBox, Sampling};
pub use model::{EncoderOutput, Encoders, Modality, TextOutput};
pub use params::{is_momentum_tracked, Bound, ModelConfig, ParamStore, MOMENTUM_PREFIXES};
pub use tokenizer::{split_words, TokenSeq, Vocab, BUILTIN_VOCAB, CLS_ID, PAD_ID, UNK_ID};

use crate::diffcore::DiffError;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("text is empty after normalisation")]
    EmptyText,
    #[error("image: {0}")]
    Image(String),
    #[error("box: {0}")]
    Box(String),
    #[error("parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}
