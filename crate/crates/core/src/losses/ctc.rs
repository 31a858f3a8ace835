//! CTC loss: negative log-probability of all blank-augmented alignments that
//! collapse to the label sequence, computed by a log-space forward recursion.
//! The gradient with respect to the input log-probabilities is the negative
//! state-occupancy posterior, computed by the matching backward recursion and
//! attached to the tape as a fused node.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{logsumexp_slice, Tensor};

/// Frames required to emit `labels`: one per label plus one separating blank
/// per adjacent repeat.
pub fn min_frames(labels: &[usize]) -> usize {
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    labels.len() + repeats
}

/// `-log P(labels | logprobs)` with blank at index 0.
///
/// `logprobs` must be `[t', vocab]` rows of log-distributions. Differentiable
/// through the tape. An alignment-infeasible label sequence is an explicit
/// error, not an infinite loss.
pub fn ctc_loss<F: Scalar>(logprobs: &Tensor<F>, labels: &[usize]) -> Result<Tensor<F>> {
    if logprobs.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "ctc_loss needs [t, vocab] log-probabilities, got {:?}",
            logprobs.shape()
        )));
    }
    let frames = logprobs.shape()[0];
    let vocab = logprobs.shape()[1];
    for &l in labels {
        if l == 0 || l >= vocab {
            return Err(Error::Contract(format!(
                "label {l} invalid for vocabulary of size {vocab} with blank = 0"
            )));
        }
    }
    let need = min_frames(labels);
    if frames < need {
        return Err(Error::CtcInfeasible {
            labels: labels.len(),
            repeats: need - labels.len(),
            min_frames: need,
            frames,
        });
    }

    let lp = logprobs.data();
    let (log_p, grad) = forward_backward(&lp, frames, vocab, labels);
    Ok(logprobs.custom_scalar(-log_p, grad))
}

/// Returns `(log P, d(-log P)/d logprobs)`.
fn forward_backward<F: Scalar>(
    lp: &[F],
    frames: usize,
    vocab: usize,
    labels: &[usize],
) -> (F, Vec<F>) {
    let neg_inf = F::neg_infinity();
    // extended sequence: blank, l1, blank, l2, ..., blank
    let s_len = 2 * labels.len() + 1;
    let ext = |s: usize| -> usize {
        if s % 2 == 0 {
            0
        } else {
            labels[s / 2]
        }
    };
    // whether state s can be reached from s-2 (label differs from two back)
    let can_skip = |s: usize| -> bool { s % 2 == 1 && (s < 2 || ext(s) != ext(s - 2)) };

    let idx = |t: usize, s: usize| t * s_len + s;
    let mut alpha = vec![neg_inf; frames * s_len];
    alpha[idx(0, 0)] = lp[0];
    if s_len > 1 {
        alpha[idx(0, 1)] = lp[ext(1)];
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut terms = [neg_inf; 3];
            terms[0] = alpha[idx(t - 1, s)];
            if s >= 1 {
                terms[1] = alpha[idx(t - 1, s - 1)];
            }
            if s >= 2 && can_skip(s) {
                terms[2] = alpha[idx(t - 1, s - 2)];
            }
            let m = logsumexp_slice(&terms);
            if m.is_finite() {
                alpha[idx(t, s)] = m + lp[t * vocab + ext(s)];
            }
        }
    }
    let log_p = if s_len > 1 {
        logsumexp_slice(&[alpha[idx(frames - 1, s_len - 1)], alpha[idx(frames - 1, s_len - 2)]])
    } else {
        alpha[idx(frames - 1, 0)]
    };

    let mut beta = vec![neg_inf; frames * s_len];
    beta[idx(frames - 1, s_len - 1)] = lp[(frames - 1) * vocab];
    if s_len > 1 {
        beta[idx(frames - 1, s_len - 2)] = lp[(frames - 1) * vocab + ext(s_len - 2)];
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let mut terms = [neg_inf; 3];
            terms[0] = beta[idx(t + 1, s)];
            if s + 1 < s_len {
                terms[1] = beta[idx(t + 1, s + 1)];
            }
            if s + 2 < s_len && can_skip(s + 2) {
                terms[2] = beta[idx(t + 1, s + 2)];
            }
            let m = logsumexp_slice(&terms);
            if m.is_finite() {
                beta[idx(t, s)] = m + lp[t * vocab + ext(s)];
            }
        }
    }

    // d(-log P)/d lp[t, k] = -sum_{s: ext(s)=k} exp(alpha + beta - lp[t,k] - log P)
    let mut grad = vec![F::zero(); frames * vocab];
    for t in 0..frames {
        let mut per_symbol: Vec<Vec<F>> = vec![Vec::new(); vocab];
        for s in 0..s_len {
            let a = alpha[idx(t, s)];
            let b = beta[idx(t, s)];
            if a.is_finite() && b.is_finite() {
                per_symbol[ext(s)].push(a + b);
            }
        }
        for (k, terms) in per_symbol.iter().enumerate() {
            if terms.is_empty() {
                continue;
            }
            let occ = logsumexp_slice(terms) - lp[t * vocab + k] - log_p;
            grad[t * vocab + k] = -occ.exp();
        }
    }
    (log_p, grad)
}
