//! Training configuration.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::encoders::ModelConfig;
use crate::losses::{BoxLossWeights, LossWeights, Toggles};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub queue_capacity: usize,
    pub grad_clip: f64,
    pub weights: LossWeights,
    pub box_weights: BoxLossWeights,
    pub toggles: Toggles,
    pub seed: u64,
    /// Re-ranking depth used for the per-epoch validation report.
    pub val_rerank: usize,
    /// Stop (and checkpoint) after this many optimizer steps in total.
    pub max_steps: Option<u64>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.01,
            tau: 0.07,
            alpha: 0.4,
            beta: 0.995,
            queue_capacity: 1024,
            grad_clip: 1.0,
            weights: LossWeights::default(),
            box_weights: BoxLossWeights::default(),
            toggles: Toggles::default(),
            seed: 0,
            val_rerank: 0,
            max_steps: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size {} must be at least 2", self.batch_size));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau {} must be positive", self.tau));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} must lie in [0, 1]"));
            }
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return bad("lr, weight_decay and grad_clip must be non-negative".into());
        }
        if self.queue_capacity % self.batch_size != 0 {
            return bad(format!(
                "queue_capacity {} must be a multiple of batch_size {}",
                self.queue_capacity, self.batch_size
            ));
        }
        self.weights.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        self.model.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    /// Applies `name=on|off` component switches.
    pub fn apply_toggle(&mut self, spec: &str) -> Result<(), TrainError> {
        let (name, value) = spec
            .split_once('=')
            .ok_or_else(|| TrainError::Config(format!("toggle '{spec}' must look like name=on|off")))?;
        let on = match value {
            "on" | "true" => true,
            "off" | "false" => false,
            v => return Err(TrainError::Config(format!("toggle value '{v}' must be on or off"))),
        };
        self.toggles.set(name.trim(), on).map_err(|e| TrainError::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<TrainConfig>("{\"epochz\": 1}").is_err());
    }

    #[test]
    fn toggles_parse() {
        let mut c = TrainConfig::default();
        c.apply_toggle("rg_itc=off").unwrap();
        assert!(!c.toggles.rg_itc);
        assert!(c.apply_toggle("rg_itc").is_err());
        assert!(c.apply_toggle("foo=on").is_err());
        let odd = TrainConfig { batch_size: 24, ..TrainConfig::default() };
        assert!(odd.validate().is_err());
    }
}
