//! L2R / R2L attention decoders: conventional pre-norm Transformer decoders
//! over token embeddings with causal self-attention and cross-attention onto
//! encoder activations. The R2L decoder consumes the reversed token sequence.

use super::attention::multi_head_attention;
use super::mask::make_chunk_mask;
use super::params::Binding;
use super::subsample::positional_encoding;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Token reading order of a decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    LeftToRight,
    RightToLeft,
}

impl Direction {
    pub fn param_prefix(self) -> &'static str {
        match self {
            Direction::LeftToRight => "dec.l2r",
            Direction::RightToLeft => "dec.r2l",
        }
    }
}

/// Teacher-forced per-step logits `[len(tokens) + 1, vocab]`.
///
/// The decoder input is `sos` followed by the tokens (reversed first for
/// R2L); step `t` predicts the token at position `t` of the (possibly
/// reversed) sequence, with the final step predicting `eos`.
pub fn attention_decoder_forward<F: Scalar>(
    binding: &Binding<'_, F>,
    cfg: &ModelConfig,
    encoder_tap: &Tensor<F>,
    tokens: &[usize],
    direction: Direction,
) -> Result<Tensor<F>> {
    if tokens.is_empty() {
        return Err(Error::Contract(
            "attention decoder needs a non-empty token sequence".into(),
        ));
    }
    let prefix = direction.param_prefix();
    let sos = cfg.sos_eos();

    let mut input: Vec<usize> = Vec::with_capacity(tokens.len() + 1);
    input.push(sos);
    match direction {
        Direction::LeftToRight => input.extend_from_slice(tokens),
        Direction::RightToLeft => input.extend(tokens.iter().rev()),
    }
    for &tok in &input {
        if tok >= cfg.vocab_size {
            return Err(Error::Contract(format!(
                "token {tok} outside vocabulary of size {}",
                cfg.vocab_size
            )));
        }
    }

    let steps = input.len();
    let d = cfg.d_model;
    let embed = binding.get(&format!("{prefix}.embed"));
    let x = embed.gather_rows(&input)?;
    let pe = binding
        .graph
        .constant(&[steps, d], positional_encoding(steps, d));
    let mut x = x.scale(F::of_f64((d as f64).sqrt())).add(&pe);

    // chunk size 1 over token positions = strictly causal self-attention
    let causal_pen = make_chunk_mask(steps, 1).penalty_tensor(&binding.graph);
    for l in 0..cfg.decoder_layers {
        let lp = format!("{prefix}.layer{l}");
        let h = binding.layer_norm(&format!("{lp}.ln_self"), &x);
        let sa = multi_head_attention(
            binding,
            &format!("{lp}.self"),
            &h,
            &h,
            Some(&causal_pen),
            cfg.n_heads,
        )?;
        x = x.add(&binding.dropout(&sa));

        let h = binding.layer_norm(&format!("{lp}.ln_cross"), &x);
        let ca = multi_head_attention(
            binding,
            &format!("{lp}.cross"),
            &h,
            encoder_tap,
            None,
            cfg.n_heads,
        )?;
        x = x.add(&binding.dropout(&ca));

        let h = binding.layer_norm(&format!("{lp}.ln_ff"), &x);
        let ff = binding.linear(&format!("{lp}.ff.lin1"), &h).swish();
        let ff = binding.linear(&format!("{lp}.ff.lin2"), &binding.dropout(&ff));
        x = x.add(&ff);
    }
    let x = binding.layer_norm(&format!("{prefix}.ln_final"), &x);
    Ok(binding.linear(&format!("{prefix}.out"), &x))
}

/// Targets a decoder's logits are scored against: the (possibly reversed)
/// tokens followed by `eos`.
pub fn decoder_targets(cfg: &ModelConfig, tokens: &[usize], direction: Direction) -> Vec<usize> {
    let mut targets: Vec<usize> = match direction {
        Direction::LeftToRight => tokens.to_vec(),
        Direction::RightToLeft => tokens.iter().rev().copied().collect(),
    };
    targets.push(cfg.sos_eos());
    targets
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{init_parameters, ParameterSet};
    use crate::model::Stage;
    use crate::tensor::Graph;

    fn toy() -> (ModelConfig, ParameterSet<f64>) {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            feat_dim: 4,
            vocab_size: 6,
            conv_kernel: 3,
            ..ModelConfig::default()
        };
        let params = init_parameters(&cfg, Stage::Stage1, 41).unwrap();
        (cfg, params)
    }

    fn run(
        cfg: &ModelConfig,
        params: &ParameterSet<f64>,
        tokens: &[usize],
        dir: Direction,
    ) -> Vec<f64> {
        let g = Graph::new();
        let binding = Binding::new(params, g.clone(), false);
        let enc = g.constant(&[5, cfg.d_model], (0..40).map(|i| (i as f64) * 0.07 - 1.0).collect());
        attention_decoder_forward(&binding, cfg, &enc, tokens, dir)
            .unwrap()
            .value()
    }

    #[test]
    fn step_logits_ignore_later_tokens() {
        let (cfg, params) = toy();
        let a = run(&cfg, &params, &[1, 2, 3], Direction::LeftToRight);
        let b = run(&cfg, &params, &[1, 2, 4], Direction::LeftToRight);
        let v = cfg.vocab_size;
        // steps 0..3 consume sos, 1, 2 — identical inputs — so logits match
        for i in 0..3 * v {
            assert!(a[i].to_bits() == b[i].to_bits(), "step logits leaked at {i}");
        }
        assert!(a[3 * v..] != b[3 * v..]);
    }

    #[test]
    fn r2l_sees_reversed_sequence() {
        let (cfg, params) = toy();
        let fwd = run(&cfg, &params, &[1, 2, 3], Direction::RightToLeft);
        let rev = run(&cfg, &params, &[3, 2, 1], Direction::LeftToRight);
        // same parameter prefix would make these equal; different decoders, so
        // just check the R2L target order contract instead
        assert_eq!(decoder_targets(&cfg, &[1, 2, 3], Direction::RightToLeft), vec![3, 2, 1, 5]);
        assert_eq!(decoder_targets(&cfg, &[1, 2, 3], Direction::LeftToRight), vec![1, 2, 3, 5]);
        assert_eq!(fwd.len(), rev.len());
    }

    #[test]
    fn empty_tokens_is_contract_error() {
        let (cfg, params) = toy();
        let g = Graph::new();
        let binding = Binding::new(&params, g.clone(), false);
        let enc = g.constant(&[2, cfg.d_model], vec![0.0; 16]);
        assert!(matches!(
            attention_decoder_forward(&binding, &cfg, &enc, &[], Direction::LeftToRight),
            Err(Error::Contract(_))
        ));
    }
}
