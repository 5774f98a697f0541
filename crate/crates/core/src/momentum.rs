//! EMA parameter shadow, momentum feature queues and distillation targets.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Float, Tensor};
use crate::encoders::{is_momentum_tracked, ParamStore};

#[derive(Debug, thiserror::Error)]
pub enum MomentumError {
    #[error("parameter sets differ: {0}")]
    Mismatch(String),
    #[error("queue row {row} has norm {norm}, expected a unit vector")]
    NotUnit { row: usize, norm: f64 },
    #[error("{0}")]
    InvalidArgument(String),
}

/// Exponential moving average of the tracked online parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumParams<T> {
    pub params: ParamStore<T>,
    pub steps: u64,
}

impl<T: Float> MomentumParams<T> {
    /// Starts the shadow as an exact copy of the tracked subset.
    pub fn from_online(online: &ParamStore<T>) -> Self {
        MomentumParams { params: online.subset(is_momentum_tracked), steps: 0 }
    }

    /// `shadow <- beta * shadow + (1 - beta) * online` for every tracked tensor.
    pub fn ema_update(&mut self, online: &ParamStore<T>, beta: f64) -> Result<(), MomentumError> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(MomentumError::InvalidArgument(format!("beta {beta} outside [0, 1]")));
        }
        let tracked = online.names().filter(|n| is_momentum_tracked(n)).count();
        if tracked != self.params.len() {
            return Err(MomentumError::Mismatch(format!(
                "online has {tracked} tracked tensors, shadow has {}",
                self.params.len()
            )));
        }
        let (b, a) = (T::c(beta), T::c(1.0 - beta));
        for (name, shadow) in self.params.iter_mut() {
            let src = online.get(name).ok_or_else(|| MomentumError::Mismatch(format!("'{name}' missing online")))?;
            if src.shape() != shadow.shape() {
                return Err(MomentumError::Mismatch(format!(
                    "'{name}': shadow {:?} vs online {:?}",
                    shadow.shape(),
                    src.shape()
                )));
            }
            for (s, &o) in shadow.data_mut().iter_mut().zip(src.data()) {
                *s = b * *s + a * o;
            }
        }
        self.steps += 1;
        Ok(())
    }
}

/// Fixed-capacity FIFO ring of unit embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentumQueue {
    capacity: usize,
    dim: usize,
    storage: Vec<f64>,
    write_head: usize,
    valid_count: usize,
}

impl MomentumQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self, MomentumError> {
        if dim == 0 {
            return Err(MomentumError::InvalidArgument("queue dimension must be positive".into()));
        }
        Ok(MomentumQueue { capacity, dim, storage: vec![0.0; capacity * dim], write_head: 0, valid_count: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn write_head(&self) -> usize {
        self.write_head
    }

    pub fn valid_count(&self) -> usize {
        self.valid_count
    }

    /// Writes `batch` (`[n, dim]`, unit rows) at the head, evicting the oldest
    /// rows once full.
    pub fn enqueue<T: Float>(&mut self, batch: &Tensor<T>) -> Result<(), MomentumError> {
        let n = match batch.shape() {
            [n, d] if *d == self.dim => *n,
            s => {
                return Err(MomentumError::InvalidArgument(format!(
                    "enqueue expects [n, {}] rows, got {s:?}",
                    self.dim
                )))
            }
        };
        if self.capacity == 0 {
            return Ok(());
        }
        if n == 0 || self.capacity % n != 0 {
            return Err(MomentumError::InvalidArgument(format!(
                "batch of {n} does not divide queue capacity {}",
                self.capacity
            )));
        }
        for r in 0..n {
            let row = batch.row(r);
            let norm = row.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-4 {
                return Err(MomentumError::NotUnit { row: r, norm });
            }
        }
        for r in 0..n {
            let dst = &mut self.storage[self.write_head * self.dim..(self.write_head + 1) * self.dim];
            for (d, s) in dst.iter_mut().zip(batch.row(r)) {
                *d = s.to_f64().unwrap();
            }
            self.write_head = (self.write_head + 1) % self.capacity;
        }
        self.valid_count = (self.valid_count + n).min(self.capacity);
        Ok(())
    }

    /// Valid rows, oldest first.
    pub fn rows(&self) -> Vec<&[f64]> {
        let start = (self.write_head + self.capacity - self.valid_count) % self.capacity.max(1);
        (0..self.valid_count)
            .map(|i| {
                let r = (start + i) % self.capacity;
                &self.storage[r * self.dim..(r + 1) * self.dim]
            })
            .collect()
    }

    /// `[batch; valid queue rows]`: sample `i`'s positive sits at index `i`.
    pub fn candidate_set<T: Float>(&self, batch_momentum: &Tensor<T>) -> Result<Tensor<T>, MomentumError> {
        let n = match batch_momentum.shape() {
            [n, d] if *d == self.dim => *n,
            s => return Err(MomentumError::InvalidArgument(format!("candidate batch shape {s:?}"))),
        };
        let mut data = batch_momentum.data().to_vec();
        for row in self.rows() {
            data.extend(row.iter().map(|&v| T::c(v)));
        }
        Ok(Tensor::new(vec![n + self.valid_count, self.dim], data).expect("consistent candidate rows"))
    }

    /// Restores a queue from its serialized parts.
    pub fn from_parts(
        capacity: usize,
        dim: usize,
        storage: Vec<f64>,
        write_head: usize,
        valid_count: usize,
    ) -> Result<Self, MomentumError> {
        if storage.len() != capacity * dim || valid_count > capacity || (capacity > 0 && write_head >= capacity) {
            return Err(MomentumError::InvalidArgument("inconsistent queue state".into()));
        }
        Ok(MomentumQueue { capacity, dim, storage, write_head, valid_count })
    }

    pub fn storage(&self) -> &[f64] {
        &self.storage
    }
}

/// Row-stochastic distillation targets, `[n, m]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTargets<T> {
    pub q_i2t: Tensor<T>,
    pub q_t2i: Tensor<T>,
}

/// `alpha * softmax(z_m[i] . Z_mᵀ / tau) + (1 - alpha) * onehot(i)` per row, for
/// both directions.
pub fn soft_targets<T: Float>(
    z_v_m: &Tensor<T>,
    z_t_m: &Tensor<T>,
    cand_v_m: &Tensor<T>,
    cand_t_m: &Tensor<T>,
    alpha: f64,
    tau: f64,
) -> Result<SoftTargets<T>, MomentumError> {
    if tau <= 0.0 || tau.is_nan() {
        return Err(MomentumError::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(MomentumError::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(SoftTargets {
        q_i2t: blend(z_v_m, cand_t_m, alpha, tau)?,
        q_t2i: blend(z_t_m, cand_v_m, alpha, tau)?,
    })
}

fn blend<T: Float>(queries: &Tensor<T>, cands: &Tensor<T>, alpha: f64, tau: f64) -> Result<Tensor<T>, MomentumError> {
    let (n, d) = match queries.shape() {
        [n, d] => (*n, *d),
        s => return Err(MomentumError::InvalidArgument(format!("query shape {s:?}"))),
    };
    let m = match cands.shape() {
        [m, dd] if *dd == d && *m >= n => *m,
        s => {
            return Err(MomentumError::InvalidArgument(format!(
                "candidates {s:?} must be [m >= {n}, {d}]"
            )))
        }
    };
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let q = queries.row(i);
        let logits: Vec<f64> = (0..m)
            .map(|j| q.iter().zip(cands.row(j)).map(|(a, b)| (*a * *b).to_f64().unwrap()).sum::<f64>() / tau)
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().enumerate().map(|(j, e)| {
            let hot = if j == i { 1.0 - alpha } else { 0.0 };
            T::c(alpha * e / z + hot)
        }));
    }
    Ok(Tensor::new(vec![n, m], out).expect("consistent target rows"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rows: &[[f64; 2]]) -> Tensor<f64> {
        let v: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let n = (r[0] * r[0] + r[1] * r[1]).sqrt();
                vec![r[0] / n, r[1] / n]
            })
            .collect();
        Tensor::from_rows(&v).unwrap()
    }

    #[test]
    fn ema_extremes() {
        let cfg = ModelConfig::default();
        let online = ParamStore::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let other = ParamStore::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let mut shadow = MomentumParams::from_online(&other);
        let before = shadow.clone();
        shadow.ema_update(&online, 1.0).unwrap();
        assert_eq!(shadow.params, before.params);
        shadow.ema_update(&online, 0.0).unwrap();
        assert_eq!(shadow.params, online.subset(is_momentum_tracked));
        assert!(shadow.ema_update(&online, 1.5).is_err());
        let missing = online.subset(|n| n != "text.tok");
        assert!(matches!(shadow.ema_update(&missing, 0.5), Err(MomentumError::Mismatch(_))));
    }

    #[test]
    fn ring_buffer_evicts_oldest() {
        let mut q = MomentumQueue::new(4, 2).unwrap();
        let batches = [
            unit_rows(&[[1.0, 0.0], [0.0, 1.0]]),
            unit_rows(&[[1.0, 1.0], [1.0, -1.0]]),
            unit_rows(&[[-1.0, 0.0], [0.0, -1.0]]),
        ];
        q.enqueue(&batches[0]).unwrap();
        assert_eq!(q.valid_count(), 2);
        q.enqueue(&batches[1]).unwrap();
        q.enqueue(&batches[2]).unwrap();
        assert_eq!(q.valid_count(), 4);
        let rows: Vec<Vec<f64>> = q.rows().iter().map(|r| r.to_vec()).collect();
        let want: Vec<Vec<f64>> = batches[1..].iter().flat_map(|b| (0..2).map(|i| b.row(i).to_vec())).collect();
        assert_eq!(rows, want);
    }

    #[test]
    fn enqueue_validation() {
        let mut q = MomentumQueue::new(4, 2).unwrap();
        assert!(matches!(
            q.enqueue(&Tensor::from_rows(&[vec![2.0f64, 0.0]]).unwrap()),
            Err(MomentumError::NotUnit { .. })
        ));
        assert!(q.enqueue(&unit_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])).is_err());
    }

    #[test]
    fn candidates_put_batch_first() {
        let mut q = MomentumQueue::new(4, 2).unwrap();
        let b = unit_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(q.candidate_set(&b).unwrap().shape(), &[2, 2]);
        q.enqueue(&unit_rows(&[[1.0, 1.0], [-1.0, 1.0]])).unwrap();
        let c = q.candidate_set(&b).unwrap();
        assert_eq!(c.shape(), &[4, 2]);
        assert_eq!(&c.data()[..4], b.data());
        assert_eq!(c, q.candidate_set(&b).unwrap());
    }

    #[test]
    fn soft_target_limits() {
        let z = unit_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let t = soft_targets(&z, &z, &z, &z, 0.0, 0.07).unwrap();
        assert_eq!(t.q_i2t.data(), &[1.0, 0.0, 0.0, 1.0]);
        let same = unit_rows(&[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]);
        let t = soft_targets(&same, &same, &same, &same, 1.0, 0.07).unwrap();
        assert!(t.q_t2i.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
        assert!(soft_targets(&z, &z, &z, &z, 0.4, 0.0).is_err());
    }
}
