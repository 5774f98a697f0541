//! Epoch shuffling and batch assembly.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, DataError, SceneRecord};
use crate::encoders::{roi_align, Image, RegionBox, Sampling, TokenSeq, Vocab};

/// Index batches for one epoch: a seeded shuffle (or identity order), split
/// into full batches; the remainder is dropped.
pub fn epoch_batches(
    n_records: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    shuffle: bool,
) -> Result<Vec<Vec<usize>>, DataError> {
    if batch_size < 2 {
        return Err(DataError::Config(format!("batch size {batch_size} must be at least 2")));
    }
    let mut order: Vec<usize> = (0..n_records).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xBA7C, epoch)));
    }
    Ok(order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}

/// Everything one training step consumes. Regions are flattened in sample
/// order; `region_sample[r]` is the batch position that owns region `r`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Vec<Image>,
    pub captions: Vec<TokenSeq>,
    pub region_images: Vec<Image>,
    pub region_texts: Vec<TokenSeq>,
    pub region_sample: Vec<usize>,
    pub region_boxes: Vec<RegionBox>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_regions(&self) -> usize {
        self.region_sample.len()
    }
}

/// Tokenizes `texts` and pads them to the longest real length, capped at
/// `max_len`. Trailing padding is masked, so trimming it changes nothing.
pub fn tokenize_trimmed(vocab: &Vocab, texts: &[&str], max_len: usize) -> Result<Vec<TokenSeq>, DataError> {
    let seqs = texts.iter().map(|t| vocab.tokenize(t, max_len)).collect::<Result<Vec<_>, _>>()?;
    let longest = seqs.iter().map(TokenSeq::real_len).max().unwrap_or(1);
    Ok(seqs.iter().map(|s| s.repadded(longest)).collect())
}

/// Builds a batch: region crops are resampled to the full image size.
pub fn assemble(
    records: &[&SceneRecord],
    vocab: &Vocab,
    text_len: usize,
    region_text_len: usize,
) -> Result<Batch, DataError> {
    let mut region_images = Vec::new();
    let mut fragments = Vec::new();
    let mut region_sample = Vec::new();
    let mut region_boxes = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        let (h, w) = (rec.image.height(), rec.image.width());
        for r in &rec.regions {
            region_images.push(roi_align(&rec.image, &r.bbox, h, w, Sampling::Adaptive)?);
            fragments.push(r.fragment.as_str());
            region_sample.push(i);
            region_boxes.push(r.bbox);
        }
    }
    let captions: Vec<&str> = records.iter().map(|r| r.global_caption.as_str()).collect();
    Ok(Batch {
        images: records.iter().map(|r| r.image.clone()).collect(),
        captions: tokenize_trimmed(vocab, &captions, text_len)?,
        region_texts: tokenize_trimmed(vocab, &fragments, region_text_len)?,
        region_images,
        region_sample,
        region_boxes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn drops_the_partial_batch() {
        assert_eq!(epoch_batches(10, 4, 0, 0, true).unwrap().len(), 2);
        assert!(epoch_batches(10, 1, 0, 0, true).is_err());
    }

    #[test]
    fn seeded_and_without_duplicates() {
        let a = epoch_batches(50, 8, 3, 1, true).unwrap();
        assert_eq!(a, epoch_batches(50, 8, 3, 1, true).unwrap());
        assert_ne!(a, epoch_batches(50, 8, 3, 2, true).unwrap());
        let seen: BTreeSet<usize> = a.iter().flatten().copied().collect();
        assert_eq!(seen.len(), 48);
        assert!(seen.iter().all(|&i| i < 50));
    }
}
