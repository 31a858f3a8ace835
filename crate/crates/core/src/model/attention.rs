//! Masked multi-head scaled-dot-product attention, shared by the encoder and
//! the token decoders.

use super::params::Binding;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Multi-head attention with parameters under `prefix.{wq,wk,wv,wo}`.
///
/// `queries` is `[t_q, d]`, `keys_values` is `[t_k, d]`; `mask_penalty`, when
/// present, is a `[t_q, t_k]` additive logit penalty (0 = visible).
pub fn multi_head_attention<F: Scalar>(
    binding: &Binding<'_, F>,
    prefix: &str,
    queries: &Tensor<F>,
    keys_values: &Tensor<F>,
    mask_penalty: Option<&Tensor<F>>,
    n_heads: usize,
) -> Result<Tensor<F>> {
    let d = queries.cols();
    debug_assert_eq!(d % n_heads, 0);
    let d_head = d / n_heads;
    let inv_sqrt = F::of_f64(1.0 / (d_head as f64).sqrt());

    let q = binding.linear(&format!("{prefix}.wq"), queries);
    let k = binding.linear(&format!("{prefix}.wk"), keys_values);
    let v = binding.linear(&format!("{prefix}.wv"), keys_values);

    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = q.slice_cols(h * d_head, d_head)?;
        let kh = k.slice_cols(h * d_head, d_head)?;
        let vh = v.slice_cols(h * d_head, d_head)?;
        let mut scores = qh.matmul(&kh.transpose())?.scale(inv_sqrt);
        if let Some(pen) = mask_penalty {
            scores = scores.add(pen);
        }
        let weights = scores.softmax(1)?;
        heads.push(weights.matmul(&vh)?);
    }
    let merged = Tensor::concat_cols(&heads)?;
    Ok(binding.linear(&format!("{prefix}.wo"), &merged))
}
