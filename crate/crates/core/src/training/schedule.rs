//! Learning-rate schedule: linear warmup into inverse-square-root decay.

/// `lr = peak * min(step / warmup, sqrt(warmup / step))`, continuous at
/// `step == warmup` where both branches equal the peak.
pub fn lr_at(step: usize, peak_lr: f64, warmup_steps: usize) -> f64 {
    assert!(step >= 1, "schedule is defined for step >= 1");
    assert!(warmup_steps >= 1);
    let s = step as f64;
    let w = warmup_steps as f64;
    peak_lr * (s / w).min((w / s).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_at_warmup_and_branch_values() {
        let peak = 2e-3;
        let w = 400;
        assert!((lr_at(w, peak, w) - peak).abs() < 1e-18);
        assert!((lr_at(w / 2, peak, w) - peak / 2.0).abs() < 1e-18);
        assert!((lr_at(4 * w, peak, w) - peak / 2.0).abs() < 1e-18);
    }

    #[test]
    fn monotone_each_side_of_warmup() {
        let peak = 1.0;
        let w = 100;
        for s in 1..w {
            assert!(lr_at(s, peak, w) < lr_at(s + 1, peak, w));
        }
        for s in w..4 * w {
            assert!(lr_at(s, peak, w) > lr_at(s + 1, peak, w));
        }
    }
}
