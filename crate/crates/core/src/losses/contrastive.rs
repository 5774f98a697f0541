//! Global contrastive loss with momentum candidates and distillation targets,
//! and the region-to-global contrastive loss.

use super::{rows_of, LossError};
use crate::diffcore::{Float, Tape, Tensor, Var};

/// `-(1/count) Σ_r logp[r, idx[r]]` for a `[rows, cols]` log-probability matrix.
fn mean_nll<T: Float>(tape: &mut Tape<T>, logp: Var, idx: &[usize], count: usize) -> Result<Var, LossError> {
    let (rows, cols) = rows_of(tape.shape(logp), "nll")?;
    let mut mask = vec![T::zero(); rows * cols];
    for (r, &c) in idx.iter().enumerate() {
        mask[r * cols + c] = T::one();
    }
    let mask = tape.constant(Tensor::new(vec![rows, cols], mask)?);
    let picked = tape.mul(logp, mask)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, T::c(-1.0 / count as f64)))
}

fn scaled_logits<T: Float>(tape: &mut Tape<T>, q: Var, cands: Var, tau: f64) -> Result<Var, LossError> {
    let ct = tape.transpose(cands)?;
    let s = tape.matmul(q, ct)?;
    Ok(tape.scale(s, T::c(1.0 / tau)))
}

fn check_tau(tau: f64) -> Result<(), LossError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(LossError::InvalidArgument(format!("temperature {tau} must be positive")))
    }
}

/// Region-to-global contrastive loss. Region `r` belongs to sample
/// `sample[r]`; each region embedding is scored against the `N` batch
/// momentum embeddings of the other modality, and the two cross-entropies are
/// averaged over `2 * regions`.
pub fn rg_itc_loss<T: Float>(
    tape: &mut Tape<T>,
    z_v_regions: Var,
    z_t_regions: Var,
    sample: &[usize],
    z_v_m: Var,
    z_t_m: Var,
    tau: f64,
) -> Result<Var, LossError> {
    check_tau(tau)?;
    if sample.is_empty() {
        return Err(LossError::Empty("rg_itc_loss needs at least one region".into()));
    }
    let (r_v, _) = rows_of(tape.shape(z_v_regions), "region vision")?;
    let (r_t, _) = rows_of(tape.shape(z_t_regions), "region text")?;
    let (n, _) = rows_of(tape.shape(z_t_m), "momentum text")?;
    if r_v != sample.len() || r_t != sample.len() {
        return Err(LossError::InvalidArgument(format!(
            "{} region owners for {r_v} vision and {r_t} text rows",
            sample.len()
        )));
    }
    if let Some(&bad) = sample.iter().find(|&&i| i >= n) {
        return Err(LossError::InvalidArgument(format!("region owner {bad} outside batch of {n}")));
    }
    let count = 2 * sample.len();
    let l_v = scaled_logits(tape, z_v_regions, z_t_m, tau)?;
    let l_v = tape.log_softmax(l_v)?;
    let a = mean_nll(tape, l_v, sample, count)?;
    let l_t = scaled_logits(tape, z_t_regions, z_v_m, tau)?;
    let l_t = tape.log_softmax(l_t)?;
    let b = mean_nll(tape, l_t, sample, count)?;
    Ok(tape.add(a, b)?)
}

/// Cross-entropy between the soft targets and the online predictions over the
/// candidate sets, averaged over `2N`:
/// `(1/2N) Σ_i [CE(q_i2t[i], softmax(z_v[i] · C_tᵀ / τ)) + CE(q_t2i[i], softmax(z_t[i] · C_vᵀ / τ))]`.
pub fn itc_mcd_loss<T: Float>(
    tape: &mut Tape<T>,
    z_v: Var,
    z_t: Var,
    cand_v: Var,
    cand_t: Var,
    q_i2t: &Tensor<T>,
    q_t2i: &Tensor<T>,
    tau: f64,
) -> Result<Var, LossError> {
    check_tau(tau)?;
    let (n, _) = rows_of(tape.shape(z_v), "online vision")?;
    let (m_t, _) = rows_of(tape.shape(cand_t), "text candidates")?;
    let (m_v, _) = rows_of(tape.shape(cand_v), "vision candidates")?;
    if q_i2t.shape() != [n, m_t] || q_t2i.shape() != [n, m_v] {
        return Err(LossError::InvalidArgument(format!(
            "targets {:?}/{:?} do not match {n} queries over {m_t}/{m_v} candidates",
            q_i2t.shape(),
            q_t2i.shape()
        )));
    }
    let scale = T::c(-1.0 / (2 * n) as f64);
    let mut parts = Vec::with_capacity(2);
    for (q, c, target) in [(z_v, cand_t, q_i2t), (z_t, cand_v, q_t2i)] {
        let logits = scaled_logits(tape, q, c, tau)?;
        let logp = tape.log_softmax(logits)?;
        let target = tape.constant(target.clone());
        let prod = tape.mul(logp, target)?;
        let s = tape.sum(prod);
        parts.push(tape.scale(s, scale));
    }
    Ok(tape.add(parts[0], parts[1])?)
}
