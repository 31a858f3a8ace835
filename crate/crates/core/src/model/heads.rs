//! CTC heads: a linear layer and a log-softmax per tap, with sharing between
//! taps handled by the parameter alias table.

use super::params::{ctc_head_prefix, Binding};
use super::Tap;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Log-posteriors `[t', vocab]` for a tap's activations.
pub fn ctc_head<F: Scalar>(
    binding: &Binding<'_, F>,
    tap: Tap,
    activations: &Tensor<F>,
) -> Result<Tensor<F>> {
    let logits = binding.linear(&ctc_head_prefix(tap), activations);
    logits.log_softmax(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::init_parameters;
    use crate::model::{CtcSharing, ModelConfig, Stage};
    use crate::tensor::Graph;

    fn toy(sharing: CtcSharing) -> (ModelConfig, crate::model::ParameterSet<f64>) {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            feat_dim: 4,
            vocab_size: 6,
            conv_kernel: 3,
            ctc_sharing: sharing,
            ..ModelConfig::default()
        };
        let params = init_parameters(&cfg, Stage::Stage1, 33).unwrap();
        (cfg, params)
    }

    #[test]
    fn rows_are_log_distributions() {
        let (cfg, params) = toy(CtcSharing::C1);
        let g = Graph::new();
        let binding = Binding::new(&params, g.clone(), false);
        let x = g.constant(&[5, cfg.d_model], (0..40).map(|i| (i as f64) * 0.11 - 2.0).collect());
        let lp = ctc_head(&binding, Tap::StreamingTop, &x).unwrap().value();
        for r in 0..5 {
            let s: f64 = lp[r * cfg.vocab_size..(r + 1) * cfg.vocab_size]
                .iter()
                .map(|v| v.exp())
                .sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn c3_mutation_moves_all_taps() {
        let (cfg, mut params) = toy(CtcSharing::C3);
        let xv: Vec<f64> = (0..3 * cfg.d_model).map(|i| (i as f64) * 0.2 - 1.0).collect();
        let posterior = |params: &crate::model::ParameterSet<f64>, tap: Tap| -> Vec<f64> {
            let g = Graph::new();
            let binding = Binding::new(params, g.clone(), false);
            let x = g.constant(&[3, cfg.d_model], xv.clone());
            ctc_head(&binding, tap, &x).unwrap().value()
        };
        let before = posterior(&params, Tap::NonStreamingTop);
        // mutate through the bottom path; all taps must move
        let n = params.get("ctc.s_l.b").unwrap().data.len();
        params
            .set_data("ctc.s_l.b", (0..n).map(|i| i as f64 * 0.5).collect())
            .unwrap();
        for tap in [Tap::StreamingBottom, Tap::StreamingTop, Tap::NonStreamingTop] {
            assert_ne!(posterior(&params, tap), before);
        }
        assert_eq!(
            posterior(&params, Tap::StreamingBottom),
            posterior(&params, Tap::NonStreamingTop)
        );
    }

    #[test]
    fn c1_bottom_updates_leave_top_posteriors_unchanged() {
        let (cfg, mut params) = toy(CtcSharing::C1);
        let xv: Vec<f64> = (0..3 * cfg.d_model).map(|i| (i as f64) * 0.2 - 1.0).collect();
        let posterior = |params: &crate::model::ParameterSet<f64>, tap: Tap| -> Vec<f64> {
            let g = Graph::new();
            let binding = Binding::new(params, g.clone(), false);
            let x = g.constant(&[3, cfg.d_model], xv.clone());
            ctc_head(&binding, tap, &x).unwrap().value()
        };
        let top_before: Vec<f64> = posterior(&params, Tap::StreamingTop);
        let ns_before = posterior(&params, Tap::NonStreamingTop);
        let n = params.get("ctc.s_l.b").unwrap().data.len();
        params
            .set_data("ctc.s_l.b", (0..n).map(|i| i as f64 * 0.7 - 1.0).collect())
            .unwrap();
        let top_after = posterior(&params, Tap::StreamingTop);
        assert!(top_before
            .iter()
            .zip(top_after.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(ns_before, top_after);
    }
}
