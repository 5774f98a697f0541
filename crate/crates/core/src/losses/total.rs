//! Loss weights, component toggles and the weighted total.

use serde::{Deserialize, Serialize};

use super::LossError;
use crate::diffcore::{Float, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub itc: f64,
    pub itm: f64,
    pub rg_itc: f64,
    pub rg_itm: f64,
    #[serde(rename = "box")]
    pub box_: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { itc: 0.25, itm: 1.0, rg_itc: 0.25, rg_itm: 0.5, box_: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let all = [self.itc, self.itm, self.rg_itc, self.rg_itm, self.box_];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(LossError::InvalidArgument(format!("loss weights must be non-negative, got {all:?}")));
        }
        Ok(())
    }

    /// Weights with the disabled components zeroed. The box loss rides on the
    /// region-global matching pass, so it follows the `rg_itm` toggle.
    pub fn effective(&self, toggles: &Toggles) -> LossWeights {
        LossWeights {
            rg_itc: if toggles.rg_itc { self.rg_itc } else { 0.0 },
            rg_itm: if toggles.rg_itm { self.rg_itm } else { 0.0 },
            box_: if toggles.rg_itm { self.box_ } else { 0.0 },
            ..*self
        }
    }
}

/// Component switches of the ablation grid: momentum contrast (queue
/// candidates), momentum distillation (soft targets), and the two
/// region-global objectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub mc: bool,
    pub md: bool,
    pub rg_itc: bool,
    pub rg_itm: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles { mc: true, md: true, rg_itc: true, rg_itm: true }
    }
}

impl Toggles {
    pub const NONE: Toggles = Toggles { mc: false, md: false, rg_itc: false, rg_itm: false };

    /// Sets one switch by name (`mc`, `md`, `rg_itc`, `rg_itm`).
    pub fn set(&mut self, name: &str, on: bool) -> Result<(), LossError> {
        match name {
            "mc" => self.mc = on,
            "md" => self.md = on,
            "rg_itc" => self.rg_itc = on,
            "rg_itm" => self.rg_itm = on,
            other => return Err(LossError::InvalidArgument(format!("unknown component '{other}'"))),
        }
        Ok(())
    }

    /// Short label such as `MC+MD+RG-ITC`, or `baseline` when all are off.
    pub fn label(&self) -> String {
        let names = [(self.mc, "MC"), (self.md, "MD"), (self.rg_itc, "RG-ITC"), (self.rg_itm, "RG-ITM")];
        let on: Vec<&str> = names.iter().filter(|(b, _)| *b).map(|(_, n)| *n).collect();
        if on.is_empty() {
            "baseline".into()
        } else {
            on.join("+")
        }
    }
}

/// The recorded component losses; `None` marks a term that was not built.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossVars {
    pub itc_mcd: Option<Var>,
    pub itm: Option<Var>,
    pub rg_itc: Option<Var>,
    pub rg_itm: Option<Var>,
    pub box_: Option<Var>,
}

/// Scalar values of the five losses and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub itc_mcd: f64,
    pub itm: f64,
    pub rg_itc: f64,
    pub rg_itm: f64,
    #[serde(rename = "box")]
    pub box_: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// Builds a breakdown from component values, computing the total.
    pub fn from_parts(parts: [f64; 5], weights: LossWeights) -> LossBreakdown {
        let w = [weights.itc, weights.itm, weights.rg_itc, weights.rg_itm, weights.box_];
        let total = parts.iter().zip(w).map(|(p, w)| p * w).sum();
        LossBreakdown { itc_mcd: parts[0], itm: parts[1], rg_itc: parts[2], rg_itm: parts[3], box_: parts[4], total, weights }
    }

    pub fn parts(&self) -> [f64; 5] {
        [self.itc_mcd, self.itm, self.rg_itc, self.rg_itm, self.box_]
    }
}

/// Weighted sum of the recorded terms. Terms with weight zero contribute
/// nothing; a term that is absent must have weight zero.
pub fn total_loss<T: Float>(tape: &mut Tape<T>, vars: &LossVars, weights: &LossWeights) -> Result<(Var, LossBreakdown), LossError> {
    weights.validate()?;
    let items = [
        (vars.itc_mcd, weights.itc, "itc"),
        (vars.itm, weights.itm, "itm"),
        (vars.rg_itc, weights.rg_itc, "rg_itc"),
        (vars.rg_itm, weights.rg_itm, "rg_itm"),
        (vars.box_, weights.box_, "box"),
    ];
    let mut parts = [0.0; 5];
    let mut acc: Option<Var> = None;
    for (slot, (var, w, name)) in items.into_iter().enumerate() {
        let Some(v) = var else {
            if w != 0.0 {
                return Err(LossError::InvalidArgument(format!("{name} has weight {w} but was not computed")));
            }
            continue;
        };
        parts[slot] = tape.value(v).item().to_f64().unwrap();
        if w == 0.0 {
            continue;
        }
        let term = tape.scale(v, T::c(w));
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    let total = match acc {
        Some(a) => a,
        None => tape.constant(crate::diffcore::Tensor::scalar(T::zero())),
    };
    let mut breakdown = LossBreakdown::from_parts(parts, *weights);
    breakdown.total = tape.value(total).item().to_f64().unwrap();
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    #[test]
    fn unit_losses_sum_to_weight_total() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::scalar(1.0));
        let one = || Some(v);
        let vars = LossVars { itc_mcd: one(), itm: one(), rg_itc: one(), rg_itm: one(), box_: one() };
        let (t, b) = total_loss(&mut tape, &vars, &LossWeights::default()).unwrap();
        assert!((tape.value(t).item() - 2.1).abs() < 1e-12);
        assert!((b.total - 2.1).abs() < 1e-12);
        let zero = LossWeights { itc: 0.0, itm: 0.0, rg_itc: 0.0, rg_itm: 0.0, box_: 0.0 };
        let (t, _) = total_loss(&mut tape, &vars, &zero).unwrap();
        assert_eq!(tape.value(t).item(), 0.0);
        assert!(total_loss(&mut tape, &vars, &LossWeights { itm: -1.0, ..zero }).is_err());
    }

    #[test]
    fn toggle_labels() {
        assert_eq!(Toggles::NONE.label(), "baseline");
        let mut t = Toggles::default();
        t.set("rg_itc", false).unwrap();
        assert_eq!(t.label(), "MC+MD+RG-ITM");
        assert!(t.set("xyz", true).is_err());
        let w = LossWeights::default().effective(&t);
        assert_eq!((w.rg_itc, w.rg_itm, w.box_), (0.0, 0.5, 0.1));
    }
}
