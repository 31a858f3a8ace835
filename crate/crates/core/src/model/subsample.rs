//! 4x subsampling frontend: two stride-2 kernel-3 conv stages over a
//! symmetrically padded input.
//!
//! With 3 zero frames of padding on each side, output frame `t'` has receptive
//! field `[4t' - 3, 4t' + 3]` in input frames, so it is computable exactly when
//! input frame `4t' + 3` exists. `T' = ceil(T / 4)`, and a prefix of `4k` input
//! frames yields exactly the first `k` output frames bit-identically to the
//! full pass, which is what aligns chunk availability with audio time: one
//! output frame covers 40 ms of audio at a 10 ms frame shift.

use super::params::Binding;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Minimum raw frame count accepted by the frontend.
pub const MIN_FRAMES: usize = 7;
const PAD: usize = 3;

/// Output length of the frontend: `ceil(t / 4)`.
pub fn subsampled_len(t: usize) -> usize {
    (t + 3) / 4
}

/// Input frames that must be present before output frame `t'` is final.
pub fn frames_needed(t_prime: usize) -> usize {
    4 * t_prime + 4
}

/// Sinusoidal absolute positions, `[t, d]` row-major.
pub fn positional_encoding<F: Scalar>(t: usize, d: usize) -> Vec<F> {
    let mut pe = vec![F::zero(); t * d];
    for pos in 0..t {
        for i in 0..d / 2 {
            let freq = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[pos * d + 2 * i] = F::of_f64(freq.sin());
            pe[pos * d + 2 * i + 1] = F::of_f64(freq.cos());
        }
    }
    pe
}

/// Runs the frontend on raw features (`t * feat_dim` row-major), returning
/// `[T', d_model]` activations with positional encoding added.
pub fn subsample<F: Scalar>(
    binding: &Binding<'_, F>,
    features: &[F],
    t: usize,
    feat_dim: usize,
    d_model: usize,
) -> Result<Tensor<F>> {
    if t < MIN_FRAMES {
        return Err(Error::Dimension(format!(
            "utterance of {t} frames is shorter than the frontend minimum {MIN_FRAMES}"
        )));
    }
    assert_eq!(features.len(), t * feat_dim, "feature buffer length mismatch");

    let mut padded = vec![F::zero(); (t + 2 * PAD) * feat_dim];
    padded[PAD * feat_dim..(PAD + t) * feat_dim].copy_from_slice(features);
    let x = binding.graph.constant(&[t + 2 * PAD, feat_dim], padded);

    let w1 = binding.get("sub.conv1.w");
    let b1 = binding.get("sub.conv1.b");
    let h = x.conv1d(&w1, 2)?.add_row(&b1).relu();
    let w2 = binding.get("sub.conv2.w");
    let b2 = binding.get("sub.conv2.b");
    let h = h.conv1d(&w2, 2)?.add_row(&b2).relu();

    let t_out = h.shape()[0];
    debug_assert_eq!(t_out, subsampled_len(t));
    let pe = binding
        .graph
        .constant(&[t_out, d_model], positional_encoding(t_out, d_model));
    Ok(h.scale(F::of_f64((d_model as f64).sqrt())).add(&pe))
}
