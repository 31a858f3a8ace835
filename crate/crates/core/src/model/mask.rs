//! Chunked attention masks: full left context within the utterance, right
//! context confined to the current chunk.

use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, MASK_PENALTY};

/// Boolean `[t, t]` visibility matrix; `allows(i, j)` says whether position
/// `i` may attend position `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    t: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn full(t: usize) -> Self {
        AttentionMask {
            t,
            allowed: vec![true; t * t],
        }
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.t + j]
    }

    /// Additive logit penalty: 0 where attention is allowed, a large negative
    /// constant where it is not. The constant is chosen so softmax weights of
    /// masked entries underflow to exactly zero.
    pub fn penalty_tensor<F: Scalar>(&self, graph: &Graph<F>) -> Tensor<F> {
        let penalty = F::of_f64(MASK_PENALTY);
        let data: Vec<F> = self
            .allowed
            .iter()
            .map(|&a| if a { F::zero() } else { penalty })
            .collect();
        graph.constant(&[self.t, self.t], data)
    }
}

/// Position `i` may attend `j` iff `j`'s chunk is not after `i`'s chunk.
pub fn make_chunk_mask(t_frames: usize, chunk_size: usize) -> AttentionMask {
    assert!(chunk_size >= 1, "chunk_size must be >= 1");
    let mut allowed = vec![false; t_frames * t_frames];
    for i in 0..t_frames {
        let visible_end = ((i / chunk_size) + 1) * chunk_size;
        for j in 0..t_frames.min(visible_end) {
            allowed[i * t_frames + j] = true;
        }
    }
    AttentionMask { t: t_frames, allowed }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_of_four_sees_whole_own_chunk() {
        let m = make_chunk_mask(8, 4);
        // frame 5 is in chunk 1, which ends at frame 7
        for j in 0..8 {
            assert!(m.allows(5, j), "frame 5 should attend frame {j}");
        }
        // frame 3 is in chunk 0: frames 4.. are invisible
        assert!(m.allows(3, 3));
        assert!(!m.allows(3, 4));
    }

    #[test]
    fn chunk_at_least_t_equals_full_context() {
        let m = make_chunk_mask(6, 6);
        assert_eq!(m, AttentionMask::full(6));
        let m = make_chunk_mask(6, 100);
        assert_eq!(m, AttentionMask::full(6));
    }

    #[test]
    fn chunk_one_is_pure_causal() {
        let m = make_chunk_mask(5, 1);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(m.allows(i, j), j <= i);
            }
        }
    }
}
