use super::{DiffError, Tape, Tensor, Var};

/// Compares the tape gradient of a scalar function against central finite
/// differences at `x` and returns the worst relative error
/// `|analytic - numeric| / max(1, |analytic|)` over all coordinates.
///
/// Runs in 64-bit; `h` must lie in `[1e-6, 1e-4]`.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, DiffError>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(DiffError::InvalidArgument(format!("step {h} outside [1e-6, 1e-4]")));
    }
    let eval = |point: &Tensor<f64>| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let v = tape.constant(point.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    let f0 = tape.value(out).item();
    if !f0.is_finite() {
        return Err(DiffError::NonFinite(format!("f(x) = {f0}")));
    }
    tape.backward(out)?;
    let analytic = tape.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::from_vec(vec![0.3, -0.7, 1.9, 0.05]);
        let err = finite_difference_check(
            |t, v| {
                let s = t.mul(v, v)?;
                Ok(t.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let err = finite_difference_check(|t, _| Ok(t.constant(Tensor::scalar(3.0))), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_non_finite_and_bad_step() {
        let x = Tensor::from_vec(vec![-1.0]);
        let log_sum = |t: &mut Tape<f64>, v: Var| {
            let l = t.log(v)?;
            Ok(t.sum(l))
        };
        assert!(matches!(finite_difference_check(log_sum, &x, 1e-5), Err(DiffError::NonFinite(_))));
        assert!(finite_difference_check(log_sum, &x, 1e-2).is_err());
    }
}
