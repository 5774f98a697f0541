//! Bidirectional retrieval: Recall@K, mean Recall, and match-head re-ranking.
//!
//! "Image query" ranks the caption gallery for each image; "text query"
//! ranks the image gallery for each caption. Ties are broken by ascending
//! gallery index.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{tokenize_trimmed, DataError, SceneRecord};
use crate::diffcore::{Float, Tape, Tensor};
use crate::encoders::{EncoderError, Encoders, Image, Modality, ModelConfig, ParamStore, TokenSeq, Vocab};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Row-major `queries × gallery` score matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub queries: usize,
    pub gallery: usize,
    pub data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(queries: usize, gallery: usize, data: Vec<f64>) -> Result<Self, EvalError> {
        if data.len() != queries * gallery {
            return Err(EvalError::InvalidArgument(format!(
                "{} scores for a {queries}x{gallery} matrix",
                data.len()
            )));
        }
        Ok(ScoreMatrix { queries, gallery, data })
    }

    pub fn row(&self, q: usize) -> &[f64] {
        &self.data[q * self.gallery..(q + 1) * self.gallery]
    }

    pub fn transpose(&self) -> ScoreMatrix {
        let mut data = Vec::with_capacity(self.data.len());
        for g in 0..self.gallery {
            data.extend((0..self.queries).map(|q| self.data[q * self.gallery + g]));
        }
        ScoreMatrix { queries: self.gallery, gallery: self.queries, data }
    }

    /// Zero-based rank of gallery item `t` for query `q`: the number of items
    /// scoring higher, plus equal-scoring items with a smaller index.
    pub fn rank_of(&self, q: usize, t: usize) -> usize {
        let row = self.row(q);
        let s = row[t];
        row.iter().enumerate().filter(|&(j, &v)| v > s || (v == s && j < t)).count()
    }

    /// Gallery indices of query `q`, best first.
    pub fn ranking(&self, q: usize) -> Vec<usize> {
        let row = self.row(q);
        let mut idx: Vec<usize> = (0..self.gallery).collect();
        idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        idx
    }
}

/// Percentage of queries whose true gallery item ranks within the top `k`,
/// for every `k` in `ks`.
pub fn recall_at_k(scores: &ScoreMatrix, truth: &[usize], ks: &[usize]) -> Result<Vec<f64>, EvalError> {
    if truth.len() != scores.queries {
        return Err(EvalError::InvalidArgument(format!("{} truths for {} queries", truth.len(), scores.queries)));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > scores.gallery) {
        return Err(EvalError::InvalidArgument(format!("k = {k} must lie in 1..={}", scores.gallery)));
    }
    if let Some(&t) = truth.iter().find(|&&t| t >= scores.gallery) {
        return Err(EvalError::InvalidArgument(format!("true index {t} outside gallery of {}", scores.gallery)));
    }
    let ranks: Vec<usize> = truth.iter().enumerate().map(|(q, &t)| scores.rank_of(q, t)).collect();
    let nq = scores.queries.max(1) as f64;
    Ok(ks.iter().map(|&k| 100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / nq).collect())
}

/// Re-scores the `top_r` best candidates of every query with `match_prob`,
/// which receives `(query, gallery)` pairs and returns match probabilities.
/// Re-scored candidates are lifted above every other item.
pub fn rerank_itm<F>(scores: &ScoreMatrix, top_r: usize, mut match_prob: F) -> Result<ScoreMatrix, EvalError>
where
    F: FnMut(&[(usize, usize)]) -> Result<Vec<f64>, EvalError>,
{
    if top_r > scores.gallery {
        return Err(EvalError::InvalidArgument(format!("top_r {top_r} exceeds gallery of {}", scores.gallery)));
    }
    let mut out = scores.clone();
    if top_r == 0 {
        return Ok(out);
    }
    let pairs: Vec<(usize, usize)> =
        (0..scores.queries).flat_map(|q| scores.ranking(q).into_iter().take(top_r).map(move |g| (q, g))).collect();
    let probs = match_prob(&pairs)?;
    if probs.len() != pairs.len() {
        return Err(EvalError::InvalidArgument("match scorer returned the wrong number of probabilities".into()));
    }
    let lift = scores.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    for (&(q, g), p) in pairs.iter().zip(probs) {
        out.data[q * scores.gallery + g] = lift + p;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Recalls {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub image_query: Recalls,
    pub text_query: Recalls,
    pub mr: f64,
    pub queries: usize,
    pub gallery: usize,
    pub rerank: usize,
}

/// Arithmetic mean of the six recalls.
pub fn mean_recall(image_query: &Recalls, text_query: &Recalls) -> f64 {
    let all = [image_query.r1, image_query.r5, image_query.r10, text_query.r1, text_query.r5, text_query.r10];
    all.iter().sum::<f64>() / 6.0
}

impl RetrievalReport {
    /// Report for paired items: image `i` and caption `i` belong together.
    pub fn from_scores(image_to_text: &ScoreMatrix, text_to_image: &ScoreMatrix, rerank: usize) -> Result<Self, EvalError> {
        let n = image_to_text.queries;
        let truth: Vec<usize> = (0..n).collect();
        let ks = [1, 5, 10].map(|k: usize| k.min(image_to_text.gallery.max(1)));
        let a = recall_at_k(image_to_text, &truth, &ks)?;
        let b = recall_at_k(text_to_image, &truth, &ks)?;
        let image_query = Recalls { r1: a[0], r5: a[1], r10: a[2] };
        let text_query = Recalls { r1: b[0], r5: b[1], r10: b[2] };
        Ok(RetrievalReport {
            mr: mean_recall(&image_query, &text_query),
            image_query,
            text_query,
            queries: n,
            gallery: image_to_text.gallery,
            rerank,
        })
    }
}

impl fmt::Display for RetrievalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>7} {:>7} {:>7}", "direction", "R@1", "R@5", "R@10")?;
        for (name, r) in [("image query", &self.image_query), ("text query", &self.text_query)] {
            writeln!(f, "{name:<12} {:>7.2} {:>7.2} {:>7.2}", r.r1, r.r5, r.r10)?;
        }
        write!(f, "{:<12} {:>7.2}   ({} queries, gallery {}, rerank {})", "mR", self.mr, self.queries, self.gallery, self.rerank)
    }
}

const EMBED_CHUNK: usize = 32;

/// Global unit embeddings `[n, d']` for every record's image and caption.
pub fn embed_corpus<T: Float>(
    records: &[&SceneRecord],
    params: &ParamStore<T>,
    model: &ModelConfig,
    vocab: &Vocab,
) -> Result<(Tensor<T>, Tensor<T>), EvalError> {
    let d = model.embed_dim;
    let (mut zv, mut zt) = (Vec::new(), Vec::new());
    for chunk in records.chunks(EMBED_CHUNK) {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let enc = Encoders::new(model, &bound);
        let images: Vec<&Image> = chunk.iter().map(|r| &r.image).collect();
        let texts: Vec<&str> = chunk.iter().map(|r| r.global_caption.as_str()).collect();
        let toks = tokenize_trimmed(vocab, &texts, model.text_len)?;
        let toks: Vec<&TokenSeq> = toks.iter().collect();
        let v = enc.encode_images(&mut tape, &images)?;
        let t = enc.encode_text(&mut tape, &toks)?;
        let a = enc.project(&mut tape, v.cls, Modality::Vision)?;
        let b = enc.project(&mut tape, t.out.cls, Modality::Text)?;
        zv.extend_from_slice(tape.data(a));
        zt.extend_from_slice(tape.data(b));
    }
    let n = records.len();
    Ok((Tensor::new(vec![n, d], zv).expect("n rows"), Tensor::new(vec![n, d], zt).expect("n rows")))
}

/// Cosine scores `image × caption`.
pub fn similarity<T: Float>(z_v: &Tensor<T>, z_t: &Tensor<T>) -> ScoreMatrix {
    let (n, m) = (z_v.shape()[0], z_t.shape()[0]);
    let mut data = Vec::with_capacity(n * m);
    for i in 0..n {
        let a = z_v.row(i);
        for j in 0..m {
            data.push(a.iter().zip(z_t.row(j)).map(|(x, y)| (*x * *y).to_f64().unwrap()).sum());
        }
    }
    ScoreMatrix { queries: n, gallery: m, data }
}

/// Match probabilities of `(image, caption)` pairs through the fusion encoder.
pub fn match_probabilities<T: Float>(
    records: &[&SceneRecord],
    pairs: &[(usize, usize)],
    params: &ParamStore<T>,
    model: &ModelConfig,
    vocab: &Vocab,
) -> Result<Vec<f64>, EvalError> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(64) {
        let mut imgs: Vec<usize> = chunk.iter().map(|p| p.0).collect();
        let mut caps: Vec<usize> = chunk.iter().map(|p| p.1).collect();
        imgs.sort_unstable();
        imgs.dedup();
        caps.sort_unstable();
        caps.dedup();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let enc = Encoders::new(model, &bound);
        let images: Vec<&Image> = imgs.iter().map(|&i| &records[i].image).collect();
        let texts: Vec<&str> = caps.iter().map(|&j| records[j].global_caption.as_str()).collect();
        let toks = tokenize_trimmed(vocab, &texts, model.text_len)?;
        let toks: Vec<&TokenSeq> = toks.iter().collect();
        let v = enc.encode_images(&mut tape, &images)?;
        let t = enc.encode_text(&mut tape, &toks)?;
        let v_idx: Vec<usize> = chunk.iter().map(|p| imgs.binary_search(&p.0).expect("collected")).collect();
        let t_idx: Vec<usize> = chunk.iter().map(|p| caps.binary_search(&p.1).expect("collected")).collect();
        let fused = enc.fuse(&mut tape, &v, &v_idx, &t, &t_idx)?;
        let logits = enc.match_head(&mut tape, fused.cls)?;
        let probs = tape.softmax(logits).map_err(EncoderError::from)?;
        out.extend(tape.data(probs).chunks(2).map(|p| p[1].to_f64().unwrap()));
    }
    Ok(out)
}

/// Embeds the records, ranks both directions, optionally re-ranks the top
/// `rerank` candidates with the match head, and reports recalls.
pub fn evaluate<T: Float>(
    records: &[&SceneRecord],
    params: &ParamStore<T>,
    model: &ModelConfig,
    vocab: &Vocab,
    rerank: usize,
) -> Result<RetrievalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::InvalidArgument("nothing to evaluate".into()));
    }
    let (zv, zt) = embed_corpus(records, params, model, vocab)?;
    let i2t = similarity(&zv, &zt);
    let t2i = i2t.transpose();
    let r = rerank.min(records.len());
    let i2t = rerank_itm(&i2t, r, |pairs| match_probabilities(records, pairs, params, model, vocab))?;
    let t2i = rerank_itm(&t2i, r, |pairs| {
        let swapped: Vec<(usize, usize)> = pairs.iter().map(|&(c, i)| (i, c)).collect();
        match_probabilities(records, &swapped, params, model, vocab)
    })?;
    RetrievalReport::from_scores(&i2t, &t2i, r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_scores_are_perfect() {
        let n = 12;
        let data = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect();
        let s = ScoreMatrix::new(n, n, data).unwrap();
        let rep = RetrievalReport::from_scores(&s, &s.transpose(), 0).unwrap();
        assert_eq!(rep.mr, 100.0);
    }

    #[test]
    fn seventh_place_counts_only_for_r10() {
        let (q, g) = (3, 20);
        let mut data = vec![0.0; q * g];
        for row in 0..q {
            for j in 0..g {
                data[row * g + j] = -(j as f64);
            }
        }
        let s = ScoreMatrix::new(q, g, data).unwrap();
        assert_eq!(recall_at_k(&s, &[6, 6, 6], &[1, 5, 10]).unwrap(), vec![0.0, 0.0, 100.0]);
        assert!(recall_at_k(&s, &[6, 6, 6], &[21]).is_err());
    }

    #[test]
    fn ties_favor_lower_gallery_index() {
        let s = ScoreMatrix::new(1, 3, vec![0.5, 0.5, 0.5]).unwrap();
        assert_eq!(s.rank_of(0, 2), 2);
        assert_eq!(s.ranking(0), vec![0, 1, 2]);
    }

    #[test]
    fn mean_recall_arithmetic() {
        let a = Recalls { r1: 10.0, r5: 20.0, r10: 30.0 };
        let b = Recalls { r1: 40.0, r5: 50.0, r10: 60.0 };
        assert_eq!(mean_recall(&a, &b), 35.0);
        assert_eq!(mean_recall(&b, &a), 35.0);
    }

    #[test]
    fn rerank_zero_and_consistent_head() {
        let s = ScoreMatrix::new(2, 4, vec![0.1, 0.9, 0.3, 0.2, 0.7, 0.1, 0.5, 0.6]).unwrap();
        assert_eq!(rerank_itm(&s, 0, |_| unreachable!()).unwrap(), s);
        let same = rerank_itm(&s, 4, |pairs| Ok(pairs.iter().map(|&(q, g)| (s.row(q)[g] + 1.0) / 2.0).collect())).unwrap();
        for q in 0..2 {
            assert_eq!(same.ranking(q), s.ranking(q));
        }
    }
}
