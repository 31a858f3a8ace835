//! Attention-decoder cross-entropy with label smoothing.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean over steps of cross-entropy against the smoothed target distribution:
/// `1 - eps` on the target, `eps / (V - 1)` elsewhere.
pub fn aed_loss<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[usize],
    label_smoothing: f64,
) -> Result<Tensor<F>> {
    if logits.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "aed_loss needs [steps, vocab] logits, got {:?}",
            logits.shape()
        )));
    }
    let (steps, vocab) = (logits.shape()[0], logits.shape()[1]);
    if steps != targets.len() {
        return Err(Error::Contract(format!(
            "aed_loss: {} logit steps vs {} targets",
            steps,
            targets.len()
        )));
    }
    let off_target = label_smoothing / (vocab - 1) as f64;
    let mut q = vec![F::of_f64(off_target); steps * vocab];
    for (t, &target) in targets.iter().enumerate() {
        if target >= vocab {
            return Err(Error::Contract(format!(
                "target {target} outside vocabulary of size {vocab}"
            )));
        }
        q[t * vocab + target] = F::of_f64(1.0 - label_smoothing);
    }
    let q = logits.graph().constant(&[steps, vocab], q);
    let logp = logits.log_softmax(1)?;
    Ok(logp
        .mul(&q)
        .sum_all()
        .scale(F::of_f64(-1.0 / steps as f64)))
}

/// Entropy of the smoothed target distribution: the attainable floor of
/// [`aed_loss`] for a single step.
pub fn smoothed_ce_floor(vocab: usize, label_smoothing: f64) -> f64 {
    let eps = label_smoothing;
    let off = eps / (vocab - 1) as f64;
    let mut h = -(1.0 - eps) * (1.0 - eps).ln();
    if eps > 0.0 {
        h -= eps * off.ln();
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn uniform_logits_cost_ln_v() {
        let g = Graph::new();
        let v = 5;
        let logits = g.constant(&[3, v], vec![0.7; 3 * v]);
        for eps in [0.0, 0.01, 0.3] {
            let loss = aed_loss(&logits, &[0, 2, 4], eps).unwrap().item();
            assert!((loss - (v as f64).ln()).abs() < 1e-12, "eps {eps}: {loss}");
        }
    }

    #[test]
    fn concentrating_prediction_drives_unsmoothed_loss_to_zero() {
        let g = Graph::new();
        let mut prev = f64::INFINITY;
        for scale in [1.0, 5.0, 20.0, 60.0] {
            let logits = g.constant(&[1, 4], vec![scale, 0.0, 0.0, 0.0]);
            let loss = aed_loss(&logits, &[0], 0.0).unwrap().item();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-12);
    }

    #[test]
    fn smoothed_loss_floor_matches_closed_form() {
        // eps = 0.01, V = 4: the optimum prediction equals the smoothed target
        // distribution, and the attainable floor is its entropy.
        let eps = 0.01;
        let v = 4;
        let floor = smoothed_ce_floor(v, eps);
        let expected = -(0.99f64 * 0.99f64.ln()) - 0.01 * (0.01f64 / 3.0).ln();
        assert!((floor - expected).abs() < 1e-15);

        // evaluating the loss at logits = ln(q) reaches the floor ...
        let g = Graph::new();
        let off = eps / 3.0;
        let q = [1.0 - eps, off, off, off];
        let logits = g.constant(&[1, v], q.iter().map(|p| p.ln()).collect());
        let loss = aed_loss(&logits, &[0], eps).unwrap().item();
        assert!((loss - floor).abs() < 1e-12);

        // ... and any perturbation sits above it
        let logits = g.constant(&[1, v], vec![q[0].ln() + 0.3, off.ln(), off.ln() - 0.2, off.ln()]);
        assert!(aed_loss(&logits, &[0], eps).unwrap().item() > floor);
    }
}
