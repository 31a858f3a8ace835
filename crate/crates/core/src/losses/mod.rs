//! Training objectives: CTC, label-smoothed attention-decoder cross-entropy,
//! the per-tap combined loss, the three-tap joint loss, and the
//! emission-latency distillation loss with its single- and two-layer variants.

mod aed;
mod ctc;

pub use aed::{aed_loss, smoothed_ce_floor};
pub use ctc::{ctc_loss, min_frames};

use crate::error::{Error, Result};
use crate::model::decoder::{attention_decoder_forward, decoder_targets, Direction};
use crate::model::heads::ctc_head;
use crate::model::{Binding, EncoderOutputs, ModelConfig, Tap};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Which encoder layers the distillation loss pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistillVariant {
    /// Last bottom layer vs last (non-streaming) top layer.
    D1,
    /// The last two layers of each block, paired positionally.
    D2,
}

impl std::str::FromStr for DistillVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "D1" | "d1" => Ok(DistillVariant::D1),
            "D2" | "d2" => Ok(DistillVariant::D2),
            other => Err(Error::Config(format!("unknown distill variant {other:?}"))),
        }
    }
}

/// Loss mixing weights.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    /// CTC weight within the per-tap combined loss.
    pub lambda: f64,
    /// R2L share of the attention-decoder loss.
    pub alpha: f64,
    /// Distillation weight in the stage-2 loss.
    pub beta: f64,
    pub label_smoothing: f64,
    pub distill_variant: DistillVariant,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.3,
            alpha: 0.3,
            beta: 0.02,
            label_smoothing: 0.01,
            distill_variant: DistillVariant::D1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) || !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "lambda {} and alpha {} must be within [0, 1]",
                self.lambda, self.alpha
            )));
        }
        if self.beta < 0.0 {
            return Err(Error::Config(format!("beta {} must be >= 0", self.beta)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} out of [0, 1)",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

/// Combined CTC and attention loss for one tap:
/// `lambda * ctc + (1 - lambda) * ((1 - alpha) * l2r + alpha * r2l)`.
pub fn asr_loss<F: Scalar>(
    binding: &Binding<'_, F>,
    cfg: &ModelConfig,
    tap: Tap,
    activations: &Tensor<F>,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<Tensor<F>> {
    let logprobs = ctc_head(binding, tap, activations)?;
    let ctc = ctc_loss(&logprobs, labels)?;

    let l2r_logits = attention_decoder_forward(binding, cfg, activations, labels, Direction::LeftToRight)?;
    let l2r = aed_loss(
        &l2r_logits,
        &decoder_targets(cfg, labels, Direction::LeftToRight),
        weights.label_smoothing,
    )?;
    let r2l_logits = attention_decoder_forward(binding, cfg, activations, labels, Direction::RightToLeft)?;
    let r2l = aed_loss(
        &r2l_logits,
        &decoder_targets(cfg, labels, Direction::RightToLeft),
        weights.label_smoothing,
    )?;

    let lambda = weights.lambda;
    let alpha = weights.alpha;
    Ok(ctc
        .scale(F::of_f64(lambda))
        .add(&l2r.scale(F::of_f64((1.0 - lambda) * (1.0 - alpha))))
        .add(&r2l.scale(F::of_f64((1.0 - lambda) * alpha))))
}

/// Unweighted sum of the per-tap losses over the streaming bottom tap, the
/// streaming top tap and (unless ablated) the non-streaming top tap.
pub fn joint_loss<F: Scalar>(
    binding: &Binding<'_, F>,
    cfg: &ModelConfig,
    enc_out: &EncoderOutputs<F>,
    labels: &[usize],
    weights: &LossWeights,
    include_non_streaming: bool,
) -> Result<Tensor<F>> {
    let s_l = asr_loss(binding, cfg, Tap::StreamingBottom, enc_out.x_s_l()?, labels, weights)?;
    let s_h = asr_loss(binding, cfg, Tap::StreamingTop, enc_out.x_s_h()?, labels, weights)?;
    let mut total = s_l.add(&s_h);
    if include_non_streaming {
        let ns_h = asr_loss(binding, cfg, Tap::NonStreamingTop, enc_out.x_ns_h()?, labels, weights)?;
        total = total.add(&ns_h);
    }
    Ok(total)
}

/// Elementwise smooth-L1 (threshold 1) of `student - teacher`, summed over all
/// elements. The teacher side receives no gradient.
fn smooth_l1_sum<F: Scalar>(student: &Tensor<F>, teacher: &Tensor<F>) -> Result<Tensor<F>> {
    if student.shape() != teacher.shape() {
        return Err(Error::Contract(format!(
            "distillation taps have different shapes: {:?} vs {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    let residual = student.sub(&teacher.detach());
    let r = residual.data();
    let one = F::one();
    let half = F::of_f64(0.5);
    let mut total = F::zero();
    let mut grad = vec![F::zero(); r.len()];
    for (i, &v) in r.iter().enumerate() {
        if v.abs() < one {
            total = total + half * v * v;
            grad[i] = v;
        } else {
            total = total + v.abs() - half;
            grad[i] = v.signum();
        }
    }
    Ok(residual.custom_scalar(total, grad))
}

/// Distillation loss: smooth-L1 between the streaming bottom-tap activations
/// and the frame-aligned non-streaming top activations, summed over all
/// elements and divided by the encoder frame count. `D2` adds the same term
/// for the second-to-last layer of each block.
pub fn distill_loss<F: Scalar>(
    enc_out: &EncoderOutputs<F>,
    variant: DistillVariant,
    n_frames: usize,
) -> Result<Tensor<F>> {
    let student = enc_out
        .streaming
        .as_ref()
        .ok_or_else(|| Error::Contract("distill_loss: streaming branch missing".into()))?;
    let teacher = enc_out
        .non_streaming
        .as_ref()
        .ok_or_else(|| Error::Contract("distill_loss: non-streaming branch missing".into()))?;

    let inv = F::of_f64(1.0 / n_frames as f64);
    let mut total = smooth_l1_sum(student.bottom_tap(), teacher.top_tap())?.scale(inv);
    if variant == DistillVariant::D2 {
        let sb = &student.bottom_layers;
        let tt = &teacher.top_layers;
        if sb.len() < 2 || tt.len() < 2 {
            return Err(Error::Contract(
                "D2 distillation needs at least two layers in each block".into(),
            ));
        }
        let second = smooth_l1_sum(&sb[sb.len() - 2], &tt[tt.len() - 2])?.scale(inv);
        total = total.add(&second);
    }
    Ok(total)
}

/// Stage-2 objective: `joint + beta * distill`.
pub fn stage2_loss<F: Scalar>(
    binding: &Binding<'_, F>,
    cfg: &ModelConfig,
    enc_out: &EncoderOutputs<F>,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<Tensor<F>> {
    let joint = joint_loss(binding, cfg, enc_out, labels, weights, true)?;
    if weights.beta == 0.0 {
        return Ok(joint);
    }
    let distill = distill_loss(enc_out, weights.distill_variant, enc_out.frames)?;
    Ok(joint.add(&distill.scale(F::of_f64(weights.beta))))
}
