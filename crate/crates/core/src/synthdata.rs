//! Deterministic synthetic corpus with exact per-token timing.
//!
//! Each text token owns a fixed feature template (a constant pattern vector
//! held for a fixed per-token duration), so a per-frame nearest-centroid
//! classifier separates tokens perfectly on noiseless features. Utterances are
//! silence-separated template runs plus Gaussian noise at a configured SNR,
//! and the generator records the exact start/end time of every token.

use crate::error::{Error, Result};
use crate::model::subsample::MIN_FRAMES;
use crate::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

/// Corpus shape and rendering parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Template duration bounds, in 10 ms frames.
    pub min_token_frames: usize,
    pub max_token_frames: usize,
    /// Silence bounds between tokens, in frames.
    pub min_silence_frames: usize,
    pub max_silence_frames: usize,
    /// Silence bounds at the utterance edges, in frames.
    pub edge_silence_frames: usize,
    pub snr_db: f64,
    pub frame_shift_ms: u32,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 1234,
            n_train: 2000,
            n_dev: 200,
            n_test: 200,
            vocab_size: 16,
            feat_dim: 16,
            min_tokens: 3,
            max_tokens: 8,
            min_token_frames: 8,
            max_token_frames: 16,
            min_silence_frames: 2,
            max_silence_frames: 6,
            edge_silence_frames: 8,
            snr_db: 10.0,
            frame_shift_ms: 10,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::Config(
                "vocab_size must leave room for blank, text and sos/eos".into(),
            ));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::Config("bad token count bounds".into()));
        }
        if self.min_token_frames == 0 || self.min_token_frames > self.max_token_frames {
            return Err(Error::Config("bad token duration bounds".into()));
        }
        if self.min_silence_frames > self.max_silence_frames {
            return Err(Error::Config("bad silence bounds".into()));
        }
        if self.edge_silence_frames < 1 {
            return Err(Error::Config("edge_silence_frames must be >= 1".into()));
        }
        Ok(())
    }

    /// Token ids usable as text: everything but blank (0) and sos/eos (last).
    pub fn text_tokens(&self) -> std::ops::Range<usize> {
        1..self.vocab_size - 1
    }
}

/// Exact time span of one reference token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start_ms: u32,
    pub end_ms: u32,
}

/// One synthetic utterance with features and ground-truth timing.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub split: Split,
    /// Row-major `[frames, feat_dim]`.
    pub features: Vec<f32>,
    pub frames: usize,
    pub feat_dim: usize,
    pub tokens: Vec<usize>,
    pub token_spans: Vec<TokenSpan>,
}

impl Utterance {
    pub fn duration_ms(&self, frame_shift_ms: u32) -> u32 {
        self.frames as u32 * frame_shift_ms
    }

    pub fn features_as<F: Scalar>(&self) -> Vec<F> {
        self.features.iter().map(|&v| F::of_f64(v as f64)).collect()
    }

    fn check_invariants(&self, frame_shift_ms: u32) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Contract(format!("utterance {}: no tokens", self.id)));
        }
        let dur = self.duration_ms(frame_shift_ms);
        let mut prev_end = 0;
        for (i, span) in self.token_spans.iter().enumerate() {
            if span.start_ms < prev_end || span.end_ms <= span.start_ms || span.end_ms > dur {
                return Err(Error::Contract(format!(
                    "utterance {}: token {i} span {:?} violates ordering within {dur} ms",
                    self.id, span
                )));
            }
            prev_end = span.end_ms;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// Per-token feature templates, derived deterministically from the seed.
pub struct TemplateBank {
    pub feat_dim: usize,
    /// `patterns[token - 1]` is the constant pattern of text token `token`.
    patterns: Vec<Vec<f32>>,
    durations: Vec<usize>,
}

/// Fixed L2 norm of every token template.
const TEMPLATE_ENERGY: f64 = 2.0;

impl TemplateBank {
    pub fn build(cfg: &DataConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let normal = Normal::new(0.0f64, 1.0).unwrap();
        let n_text = cfg.text_tokens().len();
        let mut patterns = Vec::with_capacity(n_text);
        let mut durations = Vec::with_capacity(n_text);
        for _ in 0..n_text {
            let mut v: Vec<f64> = (0..cfg.feat_dim).map(|_| normal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            for x in v.iter_mut() {
                *x = *x / norm * TEMPLATE_ENERGY;
            }
            patterns.push(v.iter().map(|&x| x as f32).collect());
            durations.push(rng.gen_range(cfg.min_token_frames..=cfg.max_token_frames));
        }
        TemplateBank {
            feat_dim: cfg.feat_dim,
            patterns,
            durations,
        }
    }

    pub fn pattern(&self, token: usize) -> &[f32] {
        &self.patterns[token - 1]
    }

    pub fn duration(&self, token: usize) -> usize {
        self.durations[token - 1]
    }

    /// Nearest-centroid frame classification; silence (all zeros) is class 0.
    pub fn classify_frame(&self, frame: &[f32]) -> usize {
        let mut best = 0usize;
        let mut best_d = frame.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        for (i, p) in self.patterns.iter().enumerate() {
            let d: f64 = frame
                .iter()
                .zip(p.iter())
                .map(|(&a, &b)| ((a - b) as f64) * ((a - b) as f64))
                .sum();
            if d < best_d {
                best_d = d;
                best = i + 1;
            }
        }
        best
    }
}

/// Renders one utterance. Deterministic in `(templates, rng state, tokens)`.
pub fn render_utterance(
    rng: &mut ChaCha8Rng,
    templates: &TemplateBank,
    cfg: &DataConfig,
    id: String,
    split: Split,
    tokens: &[usize],
) -> Result<Utterance> {
    let mut plan: Vec<(Option<usize>, usize)> = Vec::new();
    plan.push((None, rng.gen_range(1..=cfg.edge_silence_frames)));
    for (i, &tok) in tokens.iter().enumerate() {
        plan.push((Some(tok), templates.duration(tok)));
        let silence = if i + 1 == tokens.len() {
            rng.gen_range(1..=cfg.edge_silence_frames)
        } else {
            rng.gen_range(cfg.min_silence_frames..=cfg.max_silence_frames)
        };
        plan.push((None, silence));
    }

    let planned: usize = plan.iter().map(|(_, n)| n).sum();
    let total_frames = planned.max(MIN_FRAMES);
    let d = cfg.feat_dim;
    let mut features = vec![0.0f32; total_frames * d];
    let mut token_spans = Vec::with_capacity(tokens.len());
    let mut t = 0usize;
    for (tok, n) in plan {
        if let Some(tok) = tok {
            let pattern = templates.pattern(tok);
            for frame in t..t + n {
                features[frame * d..(frame + 1) * d].copy_from_slice(pattern);
            }
            token_spans.push(TokenSpan {
                start_ms: t as u32 * cfg.frame_shift_ms,
                end_ms: (t + n) as u32 * cfg.frame_shift_ms,
            });
        }
        t += n;
    }

    if cfg.snr_db.is_finite() {
        let signal_power = TEMPLATE_ENERGY * TEMPLATE_ENERGY / d as f64;
        let noise_power = signal_power / 10f64.powf(cfg.snr_db / 10.0);
        let normal = Normal::new(0.0f64, noise_power.sqrt()).unwrap();
        for v in features.iter_mut() {
            *v += normal.sample(rng) as f32;
        }
    }

    let utt = Utterance {
        id,
        split,
        features,
        frames: total_frames,
        feat_dim: d,
        tokens: tokens.to_vec(),
        token_spans,
    };
    utt.check_invariants(cfg.frame_shift_ms)?;
    Ok(utt)
}

/// A generated corpus held in memory.
pub struct Corpus {
    pub config: DataConfig,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        self.utterances.iter().filter(|u| u.split == split).collect()
    }
}

/// Generates the full corpus; content is a pure function of the config.
pub fn generate_corpus(cfg: &DataConfig) -> Result<Corpus> {
    cfg.validate()?;
    let templates = TemplateBank::build(cfg);
    let mut utterances = Vec::new();
    let specs = [
        (Split::Train, cfg.n_train),
        (Split::Dev, cfg.n_dev),
        (Split::Test, cfg.n_test),
    ];
    let mut index = 0usize;
    for (split, count) in specs {
        for _ in 0..count {
            // one derived rng per utterance keeps utterances independent
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + index as u64));
            let n_tokens = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
            let tokens: Vec<usize> = (0..n_tokens)
                .map(|_| rng.gen_range(cfg.text_tokens().start..cfg.text_tokens().end))
                .collect();
            let id = format!("{}-{index:05}", split.as_str());
            utterances.push(render_utterance(
                &mut rng, &templates, cfg, id, split, &tokens,
            )?);
            index += 1;
        }
    }
    Ok(Corpus {
        config: cfg.clone(),
        utterances,
    })
}

/// Manifest line describing one utterance on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub tokens: Vec<usize>,
    pub token_spans: Vec<TokenSpan>,
    pub frames: usize,
    pub feat_dim: usize,
    pub feat_path: String,
}

/// Writes features (raw little-endian f32 plus sidecar shape files) and a
/// line-delimited JSON manifest under `dir`. Returns the manifest path.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    let feat_dir = dir.join("feats");
    std::fs::create_dir_all(&feat_dir)?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(&manifest_path)?);
    for utt in &corpus.utterances {
        let feat_rel = format!("feats/{}.f32", utt.id);
        let feat_path = dir.join(&feat_rel);
        let mut bytes = Vec::with_capacity(utt.features.len() * 4);
        for v in &utt.features {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&feat_path, bytes)?;
        std::fs::write(
            dir.join(format!("{feat_rel}.shape")),
            format!("{} {}\n", utt.frames, utt.feat_dim),
        )?;
        let entry = ManifestEntry {
            id: utt.id.clone(),
            split: utt.split,
            tokens: utt.tokens.clone(),
            token_spans: utt.token_spans.clone(),
            frames: utt.frames,
            feat_dim: utt.feat_dim,
            feat_path: feat_rel,
        };
        serde_json::to_writer(&mut manifest, &entry)
            .map_err(|e| Error::Contract(format!("manifest write: {e}")))?;
        manifest.write_all(b"\n")?;
    }
    manifest.flush()?;
    Ok(manifest_path)
}

/// Loads a corpus written by [`write_corpus`].
pub fn read_corpus(manifest_path: &Path) -> Result<Vec<Utterance>> {
    let dir = manifest_path
        .parent()
        .ok_or_else(|| Error::Contract("manifest has no parent directory".into()))?;
    let file = std::fs::File::open(manifest_path)?;
    let mut utterances = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Contract(format!("manifest parse: {e}")))?;
        let bytes = std::fs::read(dir.join(&entry.feat_path))?;
        if bytes.len() != entry.frames * entry.feat_dim * 4 {
            return Err(Error::Contract(format!(
                "feature file {} has {} bytes, expected {}",
                entry.feat_path,
                bytes.len(),
                entry.frames * entry.feat_dim * 4
            )));
        }
        let features: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        utterances.push(Utterance {
            id: entry.id,
            split: entry.split,
            features,
            frames: entry.frames,
            feat_dim: entry.feat_dim,
            tokens: entry.tokens,
            token_spans: entry.token_spans,
        });
    }
    Ok(utterances)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DataConfig {
        DataConfig {
            n_train: 20,
            n_dev: 5,
            n_test: 5,
            ..DataConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        assert_eq!(a.utterances.len(), b.utterances.len());
        for (ua, ub) in a.utterances.iter().zip(b.utterances.iter()) {
            assert_eq!(ua.id, ub.id);
            assert_eq!(ua.tokens, ub.tokens);
            assert_eq!(ua.features, ub.features);
            assert_eq!(ua.token_spans, ub.token_spans);
        }
    }

    #[test]
    fn noiseless_frames_classify_perfectly() {
        let mut cfg = small_cfg();
        cfg.snr_db = f64::INFINITY;
        let templates = TemplateBank::build(&cfg);
        let corpus = generate_corpus(&cfg).unwrap();
        for utt in &corpus.utterances {
            for (i, span) in utt.token_spans.iter().enumerate() {
                let f0 = (span.start_ms / cfg.frame_shift_ms) as usize;
                let f1 = (span.end_ms / cfg.frame_shift_ms) as usize;
                for t in f0..f1 {
                    let frame = &utt.features[t * utt.feat_dim..(t + 1) * utt.feat_dim];
                    assert_eq!(
                        templates.classify_frame(frame),
                        utt.tokens[i],
                        "{}: frame {t}",
                        utt.id
                    );
                }
            }
        }
    }

    #[test]
    fn noiseless_features_match_template_at_span_and_silence_elsewhere() {
        let mut cfg = small_cfg();
        cfg.snr_db = f64::INFINITY;
        let templates = TemplateBank::build(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let utt = render_utterance(&mut rng, &templates, &cfg, "u0".into(), Split::Train, &[3])
            .unwrap();
        let span = utt.token_spans[0];
        let f0 = (span.start_ms / cfg.frame_shift_ms) as usize;
        let f1 = (span.end_ms / cfg.frame_shift_ms) as usize;
        for t in 0..utt.frames {
            let frame = &utt.features[t * utt.feat_dim..(t + 1) * utt.feat_dim];
            if (f0..f1).contains(&t) {
                assert_eq!(frame, templates.pattern(3));
            } else {
                assert!(frame.iter().all(|&v| v == 0.0), "frame {t} not silent");
            }
        }
        // exact duration bookkeeping: spans plus silences cover the utterance
        assert_eq!(f1 - f0, templates.duration(3));
    }

    #[test]
    fn token_unigrams_near_uniform() {
        let cfg = DataConfig {
            n_train: 2500,
            n_dev: 0,
            n_test: 0,
            ..DataConfig::default()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let mut counts = vec![0usize; cfg.vocab_size];
        let mut total = 0usize;
        for utt in &corpus.utterances {
            for &t in &utt.tokens {
                counts[t] += 1;
                total += 1;
            }
        }
        assert!(total > 10_000);
        let expected = total as f64 / cfg.text_tokens().len() as f64;
        for t in cfg.text_tokens() {
            let dev = (counts[t] as f64 - expected).abs() / expected;
            assert!(dev < 0.05, "token {t}: deviation {dev}");
        }
        assert_eq!(counts[0], 0);
        assert_eq!(counts[cfg.vocab_size - 1], 0);
    }

    #[test]
    fn corpus_roundtrip_through_files() {
        let cfg = small_cfg();
        let corpus = generate_corpus(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_corpus(&corpus, dir.path()).unwrap();
        let loaded = read_corpus(&manifest).unwrap();
        assert_eq!(loaded.len(), corpus.utterances.len());
        for (a, b) in corpus.utterances.iter().zip(loaded.iter()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.features, b.features);
            assert_eq!(a.token_spans, b.token_spans);
        }
    }

    #[test]
    fn manifest_hash_is_stable_across_runs() {
        use sha2::{Digest, Sha256};
        let cfg = small_cfg();
        let mut hashes = Vec::new();
        for _ in 0..2 {
            let corpus = generate_corpus(&cfg).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let manifest = write_corpus(&corpus, dir.path()).unwrap();
            let bytes = std::fs::read(&manifest).unwrap();
            hashes.push(format!("{:x}", Sha256::digest(&bytes)));
        }
        assert_eq!(hashes[0], hashes[1]);
    }
}
