//! The five training objectives, their weighted total, and similarity-driven
//! hard-negative sampling.
//!
//! Every loss is recorded on a [`Tape`](crate::diffcore::Tape) so gradients
//! reach whichever inputs are trainable leaves; momentum embeddings and soft
//! targets enter as constants.

mod boxes;
mod contrastive;
mod matching;
mod total;

pub use boxes::{box_loss, giou, giou_corners, BoxLossWeights};
pub use contrastive::{itc_mcd_loss, rg_itc_loss};
pub use matching::{
    match_bce, negative_probabilities, sample_excluding, sample_global_negatives, sample_hard_negatives,
    GlobalNegatives, HardNegIndices,
};
pub use total::{total_loss, LossBreakdown, LossVars, LossWeights, Toggles};

use crate::diffcore::DiffError;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("{0}")]
    Empty(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("need at least two samples for negatives, got {0}")]
    TooFewSamples(usize),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub(crate) fn rows_of(shape: &[usize], what: &str) -> Result<(usize, usize), LossError> {
    match shape {
        [n, d] => Ok((*n, *d)),
        s => Err(LossError::InvalidArgument(format!("{what}: expected a matrix, got shape {s:?}"))),
    }
}
