//! The recognizer network: subsampling frontend, a bottom block of dual-mode
//! Conformer layers tapped by a bottom CTC head, a top block tapped by a top
//! CTC head, and left-to-right / right-to-left attention decoders.

pub mod attention;
pub mod conformer;
pub mod decoder;
pub mod encoder;
pub mod heads;
pub mod mask;
pub mod params;
pub mod subsample;

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub use encoder::{encoder_forward, BranchTaps, EncoderOutputs};
pub use mask::{make_chunk_mask, AttentionMask};
pub use params::{Binding, ParameterSet};

/// Which conv branch and masking family a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Streaming,
    NonStreaming,
}

/// CTC head sharing across the three encoder taps.
///
/// * `C1` — one head for both top taps, a separate bottom head.
/// * `C2` — one head for the non-streaming top tap and the bottom tap, a
///   separate streaming-top head.
/// * `C3` — a single head for all three taps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CtcSharing {
    C1,
    C2,
    C3,
}

impl std::str::FromStr for CtcSharing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "C1" | "c1" => Ok(CtcSharing::C1),
            "C2" | "c2" => Ok(CtcSharing::C2),
            "C3" | "c3" => Ok(CtcSharing::C3),
            other => Err(Error::Config(format!("unknown ctc sharing variant {other:?}"))),
        }
    }
}

/// The three encoder taps feeding CTC heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tap {
    /// Bottom block, streaming mode (`s_l`).
    StreamingBottom,
    /// Top block, streaming mode (`s_h`).
    StreamingTop,
    /// Top block, non-streaming mode (`ns_h`).
    NonStreamingTop,
}

impl Tap {
    pub fn path_segment(self) -> &'static str {
        match self {
            Tap::StreamingBottom => "s_l",
            Tap::StreamingTop => "s_h",
            Tap::NonStreamingTop => "ns_h",
        }
    }
}

/// Training stage: stage 1 trains a bottom block of `n2` layers; stage 2
/// inserts `n1` fresh layers at the top of the bottom block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Stage1,
    Stage2,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stage1" => Ok(Stage::Stage1),
            "stage2" => Ok(Stage::Stage2),
            other => Err(Error::Config(format!("unknown stage {other:?}"))),
        }
    }
}

/// Architecture shape. `n1` counts the layers inserted in stage 2, `n2` the
/// stage-1 bottom layers and `m` the top layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n1: usize,
    pub n2: usize,
    pub m: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub conv_kernel: usize,
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub subsample_factor: usize,
    pub frame_shift_ms: u32,
    pub ctc_sharing: CtcSharing,
    pub decoder_layers: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n1: 1,
            n2: 2,
            m: 2,
            d_model: 64,
            n_heads: 2,
            d_ff: 128,
            conv_kernel: 7,
            vocab_size: 16,
            feat_dim: 16,
            subsample_factor: 4,
            frame_shift_ms: 10,
            ctc_sharing: CtcSharing::C1,
            decoder_layers: 1,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// Paper-shape architecture (2/5/5, d_model 256, kernel 15), used for the
    /// parameter-overhead bound; far too large to train at desk scale.
    pub fn reference_shape() -> Self {
        ModelConfig {
            n1: 2,
            n2: 5,
            m: 5,
            d_model: 256,
            n_heads: 4,
            d_ff: 2048,
            conv_kernel: 15,
            vocab_size: 4233,
            feat_dim: 80,
            decoder_layers: 3,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n1 < 1 || self.n2 < 1 || self.m < 1 {
            return Err(Error::Config("n1, n2 and m must each be >= 1".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.subsample_factor != 4 {
            return Err(Error::Config(format!(
                "subsample_factor must be 4, got {}",
                self.subsample_factor
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size must be >= 2, got {}",
                self.vocab_size
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "conv_kernel must be odd for the centered branch, got {}",
                self.conv_kernel
            )));
        }
        if self.decoder_layers < 1 {
            return Err(Error::Config("decoder_layers must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} out of [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// CTC blank index.
    pub fn blank(&self) -> usize {
        0
    }

    /// Shared start/end-of-sequence token.
    pub fn sos_eos(&self) -> usize {
        self.vocab_size - 1
    }

    /// Token ids usable as text (everything except blank and sos/eos).
    pub fn text_tokens(&self) -> std::ops::Range<usize> {
        1..self.vocab_size - 1
    }

    /// Bottom-block depth for a stage.
    pub fn bottom_depth(&self, stage: Stage) -> usize {
        match stage {
            Stage::Stage1 => self.n2,
            Stage::Stage2 => self.n1 + self.n2,
        }
    }

    /// Duration of one encoder frame in milliseconds (subsampled).
    pub fn encoder_frame_ms(&self) -> u32 {
        self.frame_shift_ms * self.subsample_factor as u32
    }
}

/// A parameter set together with the architecture and stage it instantiates.
pub struct TrainedModel<F: crate::scalar::Scalar> {
    pub cfg: ModelConfig,
    pub stage: Stage,
    pub params: ParameterSet<F>,
}

impl<F: crate::scalar::Scalar> TrainedModel<F> {
    pub fn binding<'a>(
        &'a self,
        graph: crate::tensor::Graph<F>,
        trainable: bool,
    ) -> Binding<'a, F> {
        Binding::new(&self.params, graph, trainable)
    }
}

/// Streaming visibility policy: chunk sizes are in encoder frames after
/// subsampling. `full_context` ignores both sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSpec {
    pub bottom_chunk: usize,
    pub top_chunk: usize,
    pub full_context: bool,
}

impl ChunkSpec {
    pub fn new(bottom_chunk: usize, top_chunk: usize) -> Result<Self> {
        if bottom_chunk < 1 {
            return Err(Error::Config("bottom_chunk must be >= 1".into()));
        }
        if top_chunk < bottom_chunk {
            return Err(Error::Config(format!(
                "top_chunk {top_chunk} must be >= bottom_chunk {bottom_chunk}"
            )));
        }
        Ok(ChunkSpec {
            bottom_chunk,
            top_chunk,
            full_context: false,
        })
    }

    pub fn full() -> Self {
        ChunkSpec {
            bottom_chunk: 1,
            top_chunk: 1,
            full_context: true,
        }
    }

    /// Parses `"B/T"`, a single `"N"` (both blocks) or `"full"`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("full") {
            return Ok(ChunkSpec::full());
        }
        if let Some((b, t)) = s.split_once('/') {
            let b: usize = b
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad chunk spec {s:?}")))?;
            let t: usize = t
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad chunk spec {s:?}")))?;
            return ChunkSpec::new(b, t);
        }
        let n: usize = s
            .parse()
            .map_err(|_| Error::Config(format!("bad chunk spec {s:?}")))?;
        ChunkSpec::new(n, n)
    }
}

impl std::fmt::Display for ChunkSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.full_context {
            write!(f, "full")
        } else {
            write!(f, "{}/{}", self.bottom_chunk, self.top_chunk)
        }
    }
}
