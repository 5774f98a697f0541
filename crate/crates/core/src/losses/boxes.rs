//! Generalized IoU and the L1 + GIoU box regression loss.

use super::{rows_of, LossError};
use crate::diffcore::{Float, Tape, Tensor, Var};
use crate::encoders::RegionBox;

/// GIoU of two corner-form boxes `[x1, y1, x2, y2]`.
pub fn giou_corners(a: [f64; 4], b: [f64; 4]) -> Result<f64, LossError> {
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    for r in [a, b] {
        if !(r[2] > r[0] && r[3] > r[1]) {
            return Err(LossError::InvalidArgument(format!("box {r:?} has zero area")));
        }
    }
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    Ok(inter / union - (hull - union) / hull)
}

/// GIoU of two center-size boxes, converted to unclipped corners.
pub fn giou(a: &RegionBox, b: &RegionBox) -> Result<f64, LossError> {
    let c = |r: &RegionBox| [r.cx - r.w / 2.0, r.cy - r.h / 2.0, r.cx + r.w / 2.0, r.cy + r.h / 2.0];
    giou_corners(c(a), c(b))
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxLossWeights {
    pub l1: f64,
    pub giou: f64,
}

impl Default for BoxLossWeights {
    fn default() -> Self {
        BoxLossWeights { l1: 1.0, giou: 1.0 }
    }
}

/// `(1/R) Σ_k [λ_L1 ‖b̂_k − b_k‖₁ + λ_GIoU (1 − GIoU(b̂_k, b_k))]` for predicted
/// boxes `[R, 4]` in `(cx, cy, w, h)` form.
pub fn box_loss<T: Float>(
    tape: &mut Tape<T>,
    pred: Var,
    truth: &[RegionBox],
    weights: BoxLossWeights,
) -> Result<Var, LossError> {
    let (r, c) = rows_of(tape.shape(pred), "predicted boxes")?;
    if c != 4 || r != truth.len() {
        return Err(LossError::InvalidArgument(format!(
            "{} target boxes for predictions {:?}",
            truth.len(),
            [r, c]
        )));
    }
    if r == 0 {
        return Err(LossError::Empty("box_loss needs at least one region".into()));
    }
    let flat: Vec<T> = truth.iter().flat_map(|b| b.as_array()).map(T::c).collect();
    let gt = tape.constant(Tensor::new(vec![r, 4], flat)?);

    let diff = tape.sub(pred, gt)?;
    let abs = tape.abs(diff);
    let l1 = tape.sum_last(abs)?;

    let giou = giou_rows(tape, pred, gt, r)?;
    let one_minus = tape.neg(giou);
    let one_minus = tape.add_scalar(one_minus, T::one());

    let a = tape.scale(l1, T::c(weights.l1));
    let b = tape.scale(one_minus, T::c(weights.giou));
    let per = tape.add(a, b)?;
    let s = tape.sum(per);
    Ok(tape.scale(s, T::c(1.0 / r as f64)))
}

/// Row-wise GIoU `[r]` between two center-size box matrices on the tape.
fn giou_rows<T: Float>(tape: &mut Tape<T>, p: Var, g: Var, r: usize) -> Result<Var, LossError> {
    let corners = |tape: &mut Tape<T>, b: Var| -> Result<[Var; 4], LossError> {
        let cx = tape.slice_last(b, 0, 1)?;
        let cy = tape.slice_last(b, 1, 1)?;
        let w = tape.slice_last(b, 2, 1)?;
        let h = tape.slice_last(b, 3, 1)?;
        let hw = tape.scale(w, T::c(0.5));
        let hh = tape.scale(h, T::c(0.5));
        Ok([tape.sub(cx, hw)?, tape.sub(cy, hh)?, tape.add(cx, hw)?, tape.add(cy, hh)?])
    };
    let [px1, py1, px2, py2] = corners(tape, p)?;
    let [gx1, gy1, gx2, gy2] = corners(tape, g)?;
    let zero = tape.constant(Tensor::zeros(&[r, 1]));

    let ix1 = tape.maximum(px1, gx1)?;
    let iy1 = tape.maximum(py1, gy1)?;
    let ix2 = tape.minimum(px2, gx2)?;
    let iy2 = tape.minimum(py2, gy2)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.maximum(iw, zero)?;
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.maximum(ih, zero)?;
    let inter = tape.mul(iw, ih)?;

    let area = |tape: &mut Tape<T>, x1: Var, y1: Var, x2: Var, y2: Var| -> Result<Var, LossError> {
        let w = tape.sub(x2, x1)?;
        let h = tape.sub(y2, y1)?;
        Ok(tape.mul(w, h)?)
    };
    let ap = area(tape, px1, py1, px2, py2)?;
    let ag = area(tape, gx1, gy1, gx2, gy2)?;
    let union = tape.add(ap, ag)?;
    let union = tape.sub(union, inter)?;
    let iou = tape.div(inter, union)?;

    let cx1 = tape.minimum(px1, gx1)?;
    let cy1 = tape.minimum(py1, gy1)?;
    let cx2 = tape.maximum(px2, gx2)?;
    let cy2 = tape.maximum(py2, gy2)?;
    let hull = area(tape, cx1, cy1, cx2, cy2)?;
    let empty = tape.sub(hull, union)?;
    let frac = tape.div(empty, hull)?;
    let giou = tape.sub(iou, frac)?;
    Ok(tape.reshape(giou, &[r])?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn giou_hand_cases() {
        assert_eq!(giou_corners([0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0]).unwrap(), 1.0);
        assert!((giou_corners([0.0, 0.0, 1.0, 1.0], [1.0, 1.0, 2.0, 2.0]).unwrap() + 0.5).abs() < 1e-12);
        assert!((giou_corners([0.0, 0.0, 2.0, 2.0], [0.5, 0.5, 1.5, 1.5]).unwrap() - 0.25).abs() < 1e-12);
        assert!(giou_corners([0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn tape_giou_matches_scalar() {
        let boxes = [
            RegionBox::new(0.3, 0.4, 0.2, 0.3).unwrap(),
            RegionBox::new(0.7, 0.6, 0.4, 0.1).unwrap(),
            RegionBox::new(0.5, 0.5, 0.5, 0.5).unwrap(),
        ];
        let preds = [
            RegionBox::new(0.35, 0.42, 0.25, 0.2).unwrap(),
            RegionBox::new(0.1, 0.1, 0.1, 0.1).unwrap(),
            RegionBox::new(0.5, 0.5, 0.5, 0.5).unwrap(),
        ];
        let mut tape = Tape::<f64>::new();
        let flat: Vec<f64> = preds.iter().flat_map(|b| b.as_array()).collect();
        let p = tape.leaf(Tensor::new(vec![3, 4], flat).unwrap(), true);
        let loss = box_loss(&mut tape, p, &boxes, BoxLossWeights { l1: 0.0, giou: 1.0 }).unwrap();
        let want: f64 = preds.iter().zip(&boxes).map(|(a, b)| 1.0 - giou(a, b).unwrap()).sum::<f64>() / 3.0;
        assert!((tape.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn exact_prediction_and_pure_l1() {
        let b = RegionBox::new(0.4, 0.5, 0.2, 0.3).unwrap();
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::new(vec![1, 4], b.as_array().to_vec()).unwrap(), true);
        let l = box_loss(&mut tape, p, &[b], BoxLossWeights::default()).unwrap();
        assert!(tape.value(l).item().abs() < 1e-15);
        let shifted = tape.leaf(Tensor::new(vec![1, 4], vec![0.5, 0.5, 0.2, 0.3]).unwrap(), true);
        let l = box_loss(&mut tape, shifted, &[b], BoxLossWeights { l1: 2.0, giou: 0.0 }).unwrap();
        assert!((tape.value(l).item() - 0.2).abs() < 1e-12);
    }
}
