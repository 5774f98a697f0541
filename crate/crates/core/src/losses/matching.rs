//! Matching losses over fused pairs and similarity-proportional negative
//! sampling.

use rand::Rng;

use super::{rows_of, LossError};
use crate::diffcore::{Float, Tape, Tensor, Var};

/// Binary cross-entropy of two-way match logits `[p, 2]` against labels
/// (`true` = matched), averaged over all `p` examples. The match probability is
/// `softmax(logits)[1]`.
pub fn match_bce<T: Float>(tape: &mut Tape<T>, logits: Var, labels: &[bool]) -> Result<Var, LossError> {
    let (p, c) = rows_of(tape.shape(logits), "match logits")?;
    if c != 2 || p != labels.len() {
        return Err(LossError::InvalidArgument(format!("{} labels for match logits {:?}", labels.len(), [p, c])));
    }
    if p == 0 {
        return Err(LossError::Empty("no matching examples".into()));
    }
    let logp = tape.log_softmax(logits)?;
    let mut mask = vec![T::zero(); 2 * p];
    for (r, &y) in labels.iter().enumerate() {
        mask[2 * r + y as usize] = T::one();
    }
    let mask = tape.constant(Tensor::new(vec![p, 2], mask)?);
    let picked = tape.mul(logp, mask)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, T::c(-1.0 / p as f64)))
}

/// `P(j) ∝ exp(scores[j] / τ)` over `j ≠ exclude`; the excluded entry gets 0.
pub fn negative_probabilities(scores: &[f64], exclude: usize, tau: f64) -> Result<Vec<f64>, LossError> {
    if scores.len() < 2 {
        return Err(LossError::TooFewSamples(scores.len()));
    }
    if !(tau > 0.0) {
        return Err(LossError::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    let max = scores
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != exclude)
        .map(|(_, s)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(j, s)| if j == exclude { 0.0 } else { ((s - max) / tau).exp() })
        .collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    Ok(p)
}

/// One inverse-CDF draw from [`negative_probabilities`].
pub fn sample_excluding<R: Rng>(scores: &[f64], exclude: usize, tau: f64, rng: &mut R) -> Result<usize, LossError> {
    let p = negative_probabilities(scores, exclude, tau)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &pj) in p.iter().enumerate() {
        if pj > 0.0 {
            acc += pj;
            last = j;
            if u < acc {
                return Ok(j);
            }
        }
    }
    Ok(last)
}

fn dot_rows<T: Float>(a: &Tensor<T>, i: usize, b: &Tensor<T>) -> Vec<f64> {
    let n = b.shape()[0];
    let q = a.row(i);
    (0..n)
        .map(|j| q.iter().zip(b.row(j)).map(|(x, y)| (*x * *y).to_f64().unwrap()).sum())
        .collect()
}

/// Per-region negative indices: `j_neg[r]` is a text sample for region vision
/// `r`, `l_neg[r]` an image sample for region text `r`; neither equals the
/// region's own sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardNegIndices {
    pub j_neg: Vec<usize>,
    pub l_neg: Vec<usize>,
}

/// Draws, for every region `r` of sample `i = sample[r]`, a text index with
/// probability `∝ exp(z_v_regions[r] · z_t[j] / τ)` over `j ≠ i` and an image
/// index with probability `∝ exp(z_t_regions[r] · z_v[l] / τ)` over `l ≠ i`.
pub fn sample_hard_negatives<T: Float, R: Rng>(
    z_v_regions: &Tensor<T>,
    z_t_regions: &Tensor<T>,
    sample: &[usize],
    z_v: &Tensor<T>,
    z_t: &Tensor<T>,
    tau: f64,
    rng: &mut R,
) -> Result<HardNegIndices, LossError> {
    let (n, _) = rows_of(z_v.shape(), "online vision")?;
    if n < 2 {
        return Err(LossError::TooFewSamples(n));
    }
    if z_v_regions.shape().first() != Some(&sample.len()) || z_t_regions.shape().first() != Some(&sample.len()) {
        return Err(LossError::InvalidArgument(format!(
            "{} region owners for region embeddings {:?} / {:?}",
            sample.len(),
            z_v_regions.shape(),
            z_t_regions.shape()
        )));
    }
    let mut out = HardNegIndices { j_neg: Vec::with_capacity(sample.len()), l_neg: Vec::with_capacity(sample.len()) };
    for (r, &i) in sample.iter().enumerate() {
        if i >= n {
            return Err(LossError::InvalidArgument(format!("region owner {i} outside batch of {n}")));
        }
        out.j_neg.push(sample_excluding(&dot_rows(z_v_regions, r, z_t), i, tau, rng)?);
        out.l_neg.push(sample_excluding(&dot_rows(z_t_regions, r, z_v), i, tau, rng)?);
    }
    Ok(out)
}

/// Global matching negatives: one text per image and one image per text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlobalNegatives {
    pub text_for_image: Vec<usize>,
    pub image_for_text: Vec<usize>,
}

/// The region rule applied at global granularity.
pub fn sample_global_negatives<T: Float, R: Rng>(
    z_v: &Tensor<T>,
    z_t: &Tensor<T>,
    tau: f64,
    rng: &mut R,
) -> Result<GlobalNegatives, LossError> {
    let (n, _) = rows_of(z_v.shape(), "online vision")?;
    if n < 2 {
        return Err(LossError::TooFewSamples(n));
    }
    let mut out = GlobalNegatives { text_for_image: Vec::with_capacity(n), image_for_text: Vec::with_capacity(n) };
    for i in 0..n {
        out.text_for_image.push(sample_excluding(&dot_rows(z_v, i, z_t), i, tau, rng)?);
        out.image_for_text.push(sample_excluding(&dot_rows(z_t, i, z_v), i, tau, rng)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn half_probability_costs_ln2() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[6, 2]));
        let l = match_bce(&mut tape, logits, &[true, false, true, false, false, false]).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_predictions_cost_nothing() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::from_rows(&[vec![-20.0, 20.0], vec![20.0, -20.0]]).unwrap());
        let l = match_bce(&mut tape, logits, &[true, false]).unwrap();
        assert!(tape.value(l).item() < 1e-6);
    }

    #[test]
    fn flipping_one_label_changes_one_term() {
        let mut tape = Tape::<f64>::new();
        let raw = [vec![0.3, 1.1], vec![-0.2, 0.4], vec![0.9, -0.5], vec![0.0, 0.7]];
        let logits = tape.constant(Tensor::from_rows(&raw).unwrap());
        let a = match_bce(&mut tape, logits, &[true, true, false, false]).unwrap();
        let b = match_bce(&mut tape, logits, &[false, true, false, false]).unwrap();
        let p = 1.0 / (1.0 + (raw[0][0] - raw[0][1] as f64).exp());
        let want = (-(1.0 - p).ln() + p.ln()) / 4.0;
        assert!((tape.value(b).item() - tape.value(a).item() - want).abs() < 1e-12);
    }

    #[test]
    fn sampling_never_returns_the_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scores = [5.0, 0.1, 0.2];
        for _ in 0..1000 {
            assert_ne!(sample_excluding(&scores, 0, 0.07, &mut rng).unwrap(), 0);
        }
        assert!(matches!(sample_excluding(&[1.0], 0, 0.1, &mut rng), Err(LossError::TooFewSamples(1))));
    }

    #[test]
    fn sharp_temperature_picks_the_maximum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let scores = [0.0, 0.3, 0.5, 0.45];
        let hits = (0..10_000).filter(|_| sample_excluding(&scores, 0, 1e-4, &mut rng).unwrap() == 2).count();
        assert!(hits as f64 / 10_000.0 > 0.999);
    }
}
