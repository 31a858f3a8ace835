//! Independent oracles for tests: finite differences, brute-force CTC scoring
//! and exhaustive alignment enumeration. Nothing here is used by the library
//! itself; the implementations are deliberately naive so they can stand as
//! references for the fast paths they check.

use crate::scalar::Scalar;
use crate::tensor::logsumexp_slice;

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference<F: Scalar>(f: &mut dyn FnMut(&[F]) -> F, x: &[F], step: F) -> Vec<F> {
    let mut grad = vec![F::zero(); x.len()];
    let mut probe = x.to_vec();
    let two = F::of_f64(2.0);
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let hi = f(&probe);
        probe[i] = x[i] - step;
        let lo = f(&probe);
        probe[i] = x[i];
        grad[i] = (hi - lo) / (two * step);
    }
    grad
}

/// Relative error with an absolute floor, so near-zero gradients are compared
/// absolutely at `1e-4 * floor`.
pub fn max_rel_err<F: Scalar>(analytic: &[F], reference: &[F]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let floor = 1e-3;
    let mut worst = 0.0f64;
    for (&a, &r) in analytic.iter().zip(reference.iter()) {
        let a = a.as_f64();
        let r = r.as_f64();
        let denom = a.abs().max(r.abs()).max(floor);
        worst = worst.max((a - r).abs() / denom);
    }
    worst
}

/// Total log-probability that a random alignment string collapses to `labels`,
/// by enumerating all `V^T` alignment strings. `logprobs` is `[t, v]`
/// row-major with blank at index 0.
pub fn ctc_brute_force_logprob<F: Scalar>(
    logprobs: &[F],
    frames: usize,
    vocab: usize,
    labels: &[usize],
) -> F {
    let mut terms: Vec<F> = Vec::new();
    let mut alignment = vec![0usize; frames];
    loop {
        if collapse(&alignment) == labels {
            let mut lp = F::zero();
            for (t, &v) in alignment.iter().enumerate() {
                lp = lp + logprobs[t * vocab + v];
            }
            terms.push(lp);
        }
        // next alignment string in odometer order
        let mut pos = 0;
        loop {
            if pos == frames {
                return if terms.is_empty() {
                    F::neg_infinity()
                } else {
                    logsumexp_slice(&terms)
                };
            }
            alignment[pos] += 1;
            if alignment[pos] < vocab {
                break;
            }
            alignment[pos] = 0;
            pos += 1;
        }
    }
}

/// CTC collapse: merge repeats, then drop blanks (index 0).
pub fn collapse(alignment: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for &v in alignment {
        if v != prev && v != 0 {
            out.push(v);
        }
        prev = v;
    }
    out
}

/// Exhaustive prefix scores: total collapsed log-probability of every label
/// sequence reachable in `frames` frames, for checking beam search.
pub fn exhaustive_prefix_scores<F: Scalar>(
    logprobs: &[F],
    frames: usize,
    vocab: usize,
) -> Vec<(Vec<usize>, F)> {
    let mut by_label: std::collections::BTreeMap<Vec<usize>, Vec<F>> =
        std::collections::BTreeMap::new();
    let mut alignment = vec![0usize; frames];
    loop {
        let labels = collapse(&alignment);
        let mut lp = F::zero();
        for (t, &v) in alignment.iter().enumerate() {
            lp = lp + logprobs[t * vocab + v];
        }
        by_label.entry(labels).or_default().push(lp);
        let mut pos = 0;
        loop {
            if pos == frames {
                let mut out: Vec<(Vec<usize>, F)> = by_label
                    .into_iter()
                    .map(|(l, terms)| (l, logsumexp_slice(&terms)))
                    .collect();
                out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
                return out;
            }
            alignment[pos] += 1;
            if alignment[pos] < vocab {
                break;
            }
            alignment[pos] = 0;
            pos += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapse_rules() {
        assert_eq!(collapse(&[1, 1, 0, 2]), vec![1, 2]);
        assert_eq!(collapse(&[0, 0, 0]), Vec::<usize>::new());
        assert_eq!(collapse(&[1, 0, 1]), vec![1, 1]);
    }

    #[test]
    fn brute_force_uniform_two_frames() {
        // T=2, V=3, uniform logprobs: only alignment [a,b] collapses to [a,b],
        // so the total probability is (1/3)^2 = 1/9.
        let lp = (1.0f64 / 3.0).ln();
        let logprobs = vec![lp; 6];
        let total = ctc_brute_force_logprob(&logprobs, 2, 3, &[1, 2]);
        assert!((total - (1.0f64 / 9.0).ln()).abs() < 1e-12);
    }
}
