//! Encoder forward: subsampling, the bottom block (tapped for the bottom CTC
//! head), and the top block (tapped for the top CTC head). Streaming mode
//! applies chunk masks and the causal conv branch; non-streaming mode applies
//! full context and the centered branch.

use super::conformer::conformer_layer_forward;
use super::mask::{make_chunk_mask, AttentionMask};
use super::params::Binding;
use super::subsample::subsample;
use super::{ChunkSpec, Mode, ModelConfig, Stage};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-layer outputs of one mode's pass. The taps are the last entries of
/// each block; earlier entries feed the two-layer distillation variant.
pub struct BranchTaps<F: Scalar> {
    pub bottom_layers: Vec<Tensor<F>>,
    pub top_layers: Vec<Tensor<F>>,
}

impl<F: Scalar> BranchTaps<F> {
    pub fn bottom_tap(&self) -> &Tensor<F> {
        self.bottom_layers.last().expect("bottom block is non-empty")
    }

    pub fn top_tap(&self) -> &Tensor<F> {
        self.top_layers.last().expect("top block is non-empty")
    }
}

/// Tap activations produced by one encoder call (or a merged pair of calls).
pub struct EncoderOutputs<F: Scalar> {
    pub streaming: Option<BranchTaps<F>>,
    pub non_streaming: Option<BranchTaps<F>>,
    /// Shared subsampled length `T'`.
    pub frames: usize,
}

impl<F: Scalar> EncoderOutputs<F> {
    /// Streaming bottom tap (`x_{s,l}`).
    pub fn x_s_l(&self) -> Result<&Tensor<F>> {
        self.streaming
            .as_ref()
            .map(|t| t.bottom_tap())
            .ok_or_else(|| Error::Contract("streaming branch was not run".into()))
    }

    /// Streaming top tap (`x_{s,h}`).
    pub fn x_s_h(&self) -> Result<&Tensor<F>> {
        self.streaming
            .as_ref()
            .map(|t| t.top_tap())
            .ok_or_else(|| Error::Contract("streaming branch was not run".into()))
    }

    /// Non-streaming top tap (`x_{ns,h}`).
    pub fn x_ns_h(&self) -> Result<&Tensor<F>> {
        self.non_streaming
            .as_ref()
            .map(|t| t.top_tap())
            .ok_or_else(|| Error::Contract("non-streaming branch was not run".into()))
    }

    pub fn merge(self, other: EncoderOutputs<F>) -> EncoderOutputs<F> {
        assert_eq!(self.frames, other.frames, "merging taps of different lengths");
        EncoderOutputs {
            streaming: self.streaming.or(other.streaming),
            non_streaming: self.non_streaming.or(other.non_streaming),
            frames: self.frames,
        }
    }
}

/// Mask policy for the two blocks under a mode + chunk spec.
fn block_masks(mode: Mode, spec: &ChunkSpec, t: usize) -> (AttentionMask, AttentionMask) {
    match mode {
        Mode::NonStreaming => (AttentionMask::full(t), AttentionMask::full(t)),
        Mode::Streaming if spec.full_context => (AttentionMask::full(t), AttentionMask::full(t)),
        Mode::Streaming => (
            make_chunk_mask(t, spec.bottom_chunk),
            make_chunk_mask(t, spec.top_chunk),
        ),
    }
}

/// Test hook: run the encoder with independently chosen mask policy and conv
/// branch. `encoder_forward` dispatches here with both tied to `mode`.
pub fn encoder_forward_forced<F: Scalar>(
    binding: &Binding<'_, F>,
    cfg: &ModelConfig,
    stage: Stage,
    features: &[F],
    t: usize,
    mask_mode: Mode,
    conv_branch: Mode,
    spec: &ChunkSpec,
) -> Result<BranchTaps<F>> {
    let x = subsample(binding, features, t, cfg.feat_dim, cfg.d_model)?;
    let t_sub = x.shape()[0];
    let (bottom_mask, top_mask) = block_masks(mask_mode, spec, t_sub);
    let bottom_pen = bottom_mask.penalty_tensor(&binding.graph);
    let top_pen = top_mask.penalty_tensor(&binding.graph);

    let mut bottom_layers = Vec::new();
    let mut h = x;
    for i in 0..cfg.bottom_depth(stage) {
        h = conformer_layer_forward(
            binding,
            &format!("enc.bottom.{i}"),
            &h,
            conv_branch,
            &bottom_pen,
            cfg.n_heads,
        )?;
        bottom_layers.push(h.clone());
    }
    let mut top_layers = Vec::new();
    for j in 0..cfg.m {
        h = conformer_layer_forward(
            binding,
            &format!("enc.top.{j}"),
            &h,
            conv_branch,
            &top_pen,
            cfg.n_heads,
        )?;
        top_layers.push(h.clone());
    }
    Ok(BranchTaps {
        bottom_layers,
        top_layers,
    })
}

/// One mode's encoder pass over raw features.
pub fn encoder_forward<F: Scalar>(
    binding: &Binding<'_, F>,
    cfg: &ModelConfig,
    stage: Stage,
    features: &[F],
    t: usize,
    mode: Mode,
    spec: &ChunkSpec,
) -> Result<EncoderOutputs<F>> {
    let taps = encoder_forward_forced(binding, cfg, stage, features, t, mode, mode, spec)?;
    let frames = taps.bottom_tap().shape()[0];
    Ok(match mode {
        Mode::Streaming => EncoderOutputs {
            streaming: Some(taps),
            non_streaming: None,
            frames,
        },
        Mode::NonStreaming => EncoderOutputs {
            streaming: None,
            non_streaming: Some(taps),
            frames,
        },
    })
}

/// Both modes in one step, as joint training requires.
pub fn encoder_forward_dual<F: Scalar>(
    binding: &Binding<'_, F>,
    cfg: &ModelConfig,
    stage: Stage,
    features: &[F],
    t: usize,
    spec: &ChunkSpec,
) -> Result<EncoderOutputs<F>> {
    let s = encoder_forward(binding, cfg, stage, features, t, Mode::Streaming, spec)?;
    let ns = encoder_forward(binding, cfg, stage, features, t, Mode::NonStreaming, spec)?;
    Ok(s.merge(ns))
}
