//! Dynamic chunk sampling: one chunk policy drawn per batch.

use super::TrainConfig;
use crate::model::ChunkSpec;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Stage 1 draws a single streaming chunk size for all encoder layers,
/// uniform over the configured range; the non-streaming branch of the same
/// step always runs full-context.
pub fn sample_stage1_chunk(rng: &mut ChaCha8Rng, cfg: &TrainConfig) -> ChunkSpec {
    let c = rng.gen_range(cfg.stage1_chunk_min..=cfg.stage1_chunk_max);
    ChunkSpec::new(c, c).expect("configured bounds are validated")
}

/// Stage 2 draws the bottom chunk from a small range and derives the top
/// chunk by a fixed ratio (4 * 6 = 24 mirrors the deployment 4/24). A top
/// chunk at or beyond the utterance length behaves as full context.
pub fn sample_stage2_chunk(rng: &mut ChaCha8Rng, cfg: &TrainConfig) -> ChunkSpec {
    let b = rng.gen_range(cfg.stage2_chunk_min..=cfg.stage2_chunk_max);
    ChunkSpec::new(b, b * cfg.stage2_top_ratio).expect("configured bounds are validated")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn draws_are_reproducible_and_within_bounds() {
        let cfg = TrainConfig::default();
        let draw = |seed: u64| -> Vec<ChunkSpec> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..200).map(|_| sample_stage1_chunk(&mut rng, &cfg)).collect()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let s = sample_stage1_chunk(&mut rng, &cfg);
            assert!((cfg.stage1_chunk_min..=cfg.stage1_chunk_max).contains(&s.bottom_chunk));
            assert_eq!(s.bottom_chunk, s.top_chunk);
            let s2 = sample_stage2_chunk(&mut rng, &cfg);
            assert!((cfg.stage2_chunk_min..=cfg.stage2_chunk_max).contains(&s2.bottom_chunk));
            assert_eq!(s2.top_chunk, s2.bottom_chunk * cfg.stage2_top_ratio);
        }
    }

    #[test]
    fn ratio_six_reproduces_the_deployment_pair() {
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        loop {
            let s = sample_stage2_chunk(&mut rng, &cfg);
            if s.bottom_chunk == 4 {
                assert_eq!(s.top_chunk, 24);
                break;
            }
        }
    }
}
