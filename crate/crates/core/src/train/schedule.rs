//! Learning-rate schedule: linear warm-up, then cosine decay to a floor.

/// Fraction of steps spent warming up.
pub const WARMUP_FRACTION: f64 = 0.05;
/// Final learning rate as a fraction of the base rate.
pub const FLOOR_FRACTION: f64 = 0.1;

/// Linear warm-up over the first 5% of `total_steps`, then cosine decay from
/// `base_lr` to `0.1 * base_lr` at `total_steps`.
pub fn lr_schedule(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warm = WARMUP_FRACTION * total;
    if t < warm {
        return base_lr * t / warm;
    }
    let span = total - warm;
    let progress = if span > 0.0 { (t - warm) / span } else { 1.0 };
    let floor = FLOOR_FRACTION * base_lr;
    floor + (base_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        assert_eq!(lr_schedule(0, 1000, 1e-3), 0.0);
        assert!((lr_schedule(50, 1000, 1e-3) - 1e-3).abs() < 1e-15);
        assert!((lr_schedule(1000, 1000, 1e-3) - 1e-4).abs() < 1e-9);
        assert!(lr_schedule(25, 1000, 1e-3) < lr_schedule(40, 1000, 1e-3));
        assert!(lr_schedule(600, 1000, 1e-3) > lr_schedule(700, 1000, 1e-3));
    }
}
