//! Dual-mode Conformer layer: macaron feed-forward pair, masked self-attention
//! and a convolution module holding two depthwise kernels — causal for
//! streaming, centered for non-streaming — with every other parameter shared
//! between the modes.

use super::attention::multi_head_attention;
use super::params::Binding;
use super::Mode;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn feed_forward<F: Scalar>(binding: &Binding<'_, F>, prefix: &str, x: &Tensor<F>) -> Tensor<F> {
    let h = binding.linear(&format!("{prefix}.lin1"), x).swish();
    let h = binding.dropout(&h);
    binding.linear(&format!("{prefix}.lin2"), &h)
}

fn conv_module<F: Scalar>(
    binding: &Binding<'_, F>,
    prefix: &str,
    x: &Tensor<F>,
    mode: Mode,
) -> Result<Tensor<F>> {
    let h = binding.linear(&format!("{prefix}.pw1"), x).glu()?;
    let kernel = match mode {
        Mode::Streaming => binding.get(&format!("{prefix}.causal.kernel")),
        Mode::NonStreaming => binding.get(&format!("{prefix}.centered.kernel")),
    };
    let h = h.depthwise_conv1d(&kernel, mode == Mode::Streaming)?;
    let h = binding.layer_norm(&format!("{prefix}.ln"), &h).swish();
    Ok(binding.linear(&format!("{prefix}.pw2"), &h))
}

/// One layer: `x + ff1/2 -> x + attn -> x + conv(mode) -> x + ff2/2 -> norm`,
/// pre-norm residuals throughout. `mask_penalty` is the `[t, t]` additive
/// attention penalty for this block's chunk policy.
pub fn conformer_layer_forward<F: Scalar>(
    binding: &Binding<'_, F>,
    prefix: &str,
    x: &Tensor<F>,
    mode: Mode,
    mask_penalty: &Tensor<F>,
    n_heads: usize,
) -> Result<Tensor<F>> {
    let half = F::of_f64(0.5);

    let h = binding.layer_norm(&format!("{prefix}.ln_ff1"), x);
    let x = x.add(&feed_forward(binding, &format!("{prefix}.ff1"), &h).scale(half));

    let h = binding.layer_norm(&format!("{prefix}.ln_attn"), &x);
    let attn = multi_head_attention(
        binding,
        &format!("{prefix}.attn"),
        &h,
        &h,
        Some(mask_penalty),
        n_heads,
    )?;
    let x = x.add(&binding.dropout(&attn));

    let h = binding.layer_norm(&format!("{prefix}.ln_conv"), &x);
    let conv = conv_module(binding, &format!("{prefix}.conv"), &h, mode)?;
    let x = x.add(&binding.dropout(&conv));

    let h = binding.layer_norm(&format!("{prefix}.ln_ff2"), &x);
    let x = x.add(&feed_forward(binding, &format!("{prefix}.ff2"), &h).scale(half));

    Ok(binding.layer_norm(&format!("{prefix}.ln_final"), &x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::mask::{make_chunk_mask, AttentionMask};
    use crate::model::params::{init_parameters, ParameterSet};
    use crate::model::{ModelConfig, Stage};
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
        let params = init_parameters(&cfg, Stage::Stage1, 9).unwrap();
        (cfg, params)
    }

    fn run_layer(
        params: &ParameterSet<f64>,
        cfg: &ModelConfig,
        xv: Vec<f64>,
        t: usize,
        mode: Mode,
        chunk: Option<usize>,
    ) -> Vec<f64> {
        let g = Graph::new();
        let binding = Binding::new(params, g.clone(), false);
        let x = g.constant(&[t, cfg.d_model], xv);
        let mask = match chunk {
            Some(c) => make_chunk_mask(t, c),
            None => AttentionMask::full(t),
        };
        let pen = mask.penalty_tensor(&g);
        conformer_layer_forward(&binding, "enc.bottom.0", &x, mode, &pen, cfg.n_heads)
            .unwrap()
            .value()
    }

    #[test]
    fn streaming_chunk_output_ignores_later_frames() {
        let (cfg, params) = toy();
        let t = 8;
        let xv: Vec<f64> = (0..t * cfg.d_model).map(|i| ((i % 13) as f64) * 0.21 - 1.1).collect();
        let mut bumped = xv.clone();
        for v in bumped.iter_mut().skip(4 * cfg.d_model) {
            *v += 3.0;
        }
        let a = run_layer(&params, &cfg, xv, t, Mode::Streaming, Some(4));
        let b = run_layer(&params, &cfg, bumped, t, Mode::Streaming, Some(4));
        for i in 0..4 * cfg.d_model {
            assert!(a[i].to_bits() == b[i].to_bits(), "frame content leaked at {i}");
        }
    }

    #[test]
    fn zeroed_kernels_collapse_the_modes() {
        let (cfg, mut params) = toy();
        let k = cfg.conv_kernel * cfg.d_model;
        params
            .set_data("enc.bottom.0.conv.causal.kernel", vec![0.0; k])
            .unwrap();
        params
            .set_data("enc.bottom.0.conv.centered.kernel", vec![0.0; k])
            .unwrap();
        let t = 6;
        let xv: Vec<f64> = (0..t * cfg.d_model).map(|i| ((i % 7) as f64) * 0.3 - 0.9).collect();
        let a = run_layer(&params, &cfg, xv.clone(), t, Mode::Streaming, None);
        let b = run_layer(&params, &cfg, xv, t, Mode::NonStreaming, None);
        assert_eq!(a, b);
    }

    #[test]
    fn modes_differ_only_by_kernel() {
        let (cfg, mut params) = toy();
        // make the centered kernel equal to the causal one: outputs still
        // differ because the window placement differs
        let causal = params.get("enc.bottom.0.conv.causal.kernel").unwrap().data.clone();
        params
            .set_data("enc.bottom.0.conv.centered.kernel", causal)
            .unwrap();
        let t = 6;
        let xv: Vec<f64> = (0..t * cfg.d_model).map(|i| ((i % 11) as f64) * 0.17 - 0.5).collect();
        let a = run_layer(&params, &cfg, xv.clone(), t, Mode::Streaming, None);
        let b = run_layer(&params, &cfg, xv, t, Mode::NonStreaming, None);
        assert_ne!(a, b);
    }
}
