//! Synthetic audio words and spoken passages.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::metrics::FrameSpan;
use crate::rng::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioConfig {
    /// Standard deviation of the additive frame noise.
    pub noise_std: f64,
    /// Relative duration change: an instance lasts `native · (1 ± warp)` frames.
    pub warp: f64,
    pub min_frames: usize,
    pub max_frames: usize,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.5,
            warp: 0.25,
            min_frames: 4,
            max_frames: 14,
        }
    }
}

/// Frames of one spoken word, `T×39`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioWord {
    pub frames: Vec<f32>,
    pub token_label: usize,
    /// Absolute start frame inside the owning passage.
    pub frame_offset: usize,
}

impl AudioWord {
    pub fn num_frames(&self) -> usize {
        self.frames.len() / FEATURE_DIM
    }

    pub fn to_tensor(&self) -> Tensor {
        frames_to_tensor(&self.frames)
    }
}

pub fn frames_to_tensor(frames: &[f32]) -> Tensor {
    Tensor::new(
        vec![frames.len() / FEATURE_DIM, FEATURE_DIM],
        frames.iter().map(|&v| v as f64).collect(),
    )
    .expect("whole frames")
}

/// Where an ASR hypothesis word came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AsrOrigin {
    /// Recognised (correctly or not) from this true word.
    Word(usize),
    /// Spurious word inserted after this true word.
    Inserted(usize),
}

/// Output of the simulated recogniser for one passage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsrOutput {
    pub tokens: Vec<usize>,
    pub boundaries: Vec<FrameSpan>,
    pub origin: Vec<AsrOrigin>,
    pub wer: f64,
    pub target_wer: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpokenPassage {
    pub words: Vec<AudioWord>,
    pub true_tokens: Vec<usize>,
    pub true_boundaries: Vec<FrameSpan>,
    pub asr: Option<AsrOutput>,
}

impl SpokenPassage {
    pub fn total_frames(&self) -> usize {
        self.true_boundaries.last().map_or(0, |b| b.end)
    }

    pub fn asr(&self) -> Result<&AsrOutput> {
        self.asr
            .as_ref()
            .ok_or_else(|| Error::data("passage has no ASR transcript"))
    }

    /// Frames `[span.start, span.end)` regardless of word boundaries.
    pub fn segment_frames(&self, span: FrameSpan) -> Vec<f32> {
        let mut out = Vec::with_capacity(span.len() * FEATURE_DIM);
        for (word, b) in self.words.iter().zip(&self.true_boundaries) {
            let lo = span.start.max(b.start);
            let hi = span.end.min(b.end);
            if lo < hi {
                out.extend_from_slice(
                    &word.frames[(lo - b.start) * FEATURE_DIM..(hi - b.start) * FEATURE_DIM],
                );
            }
        }
        out
    }
}

/// One noisy, time-warped realisation of `token`.
pub fn synthesize_audio_word(
    vocab: &Vocabulary,
    token: usize,
    config: &AudioConfig,
    seed: u64,
) -> Result<AudioWord> {
    let proto = vocab.prototype(token)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let native = proto.duration();
    let len = if config.warp > 0.0 {
        let factor: f64 = rng.gen_range(1.0 - config.warp..=1.0 + config.warp);
        ((native as f64 * factor).round() as usize).clamp(config.min_frames.max(1), config.max_frames)
    } else {
        native
    };
    let clean = proto.resample(len);
    let frames = if config.noise_std > 0.0 {
        let noise = Normal::new(0.0, config.noise_std)
            .map_err(|e| Error::config("noise_std", e.to_string()))?;
        clean.iter().map(|&v| (v + noise.sample(&mut rng)) as f32).collect()
    } else {
        clean.iter().map(|&v| v as f32).collect()
    };
    Ok(AudioWord {
        frames,
        token_label: token,
        frame_offset: 0,
    })
}

/// Concatenate one audio word per token. Channel fields stay unset.
pub fn synthesize_passage(
    vocab: &Vocabulary,
    tokens: &[usize],
    config: &AudioConfig,
    seed: u64,
) -> Result<SpokenPassage> {
    if tokens.is_empty() {
        return Err(Error::contract("cannot synthesise an empty passage"));
    }
    let mut words = Vec::with_capacity(tokens.len());
    let mut boundaries = Vec::with_capacity(tokens.len());
    let mut offset = 0;
    for (i, &token) in tokens.iter().enumerate() {
        let mut word = synthesize_audio_word(vocab, token, config, derive_seed(seed, &format!("word/{i}")))?;
        word.frame_offset = offset;
        let len = word.num_frames();
        boundaries.push(FrameSpan {
            start: offset,
            end: offset + len,
        });
        offset += len;
        words.push(word);
    }
    Ok(SpokenPassage {
        words,
        true_tokens: tokens.to_vec(),
        true_boundaries: boundaries,
        asr: None,
    })
}
