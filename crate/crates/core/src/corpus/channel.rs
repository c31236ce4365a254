//! Simulated speech recogniser: confusable substitutions, deletions that merge
//! word intervals, insertions that split them, and boundary jitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::audio::{AsrOrigin, AsrOutput, SpokenPassage};
use super::vocab::Vocabulary;
use super::wer::compute_wer;
use crate::error::{Error, Result};
use crate::metrics::FrameSpan;

pub const MAX_TARGET_WER: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    /// Shares of the error mass; they must sum to one.
    pub substitution_share: f64,
    pub deletion_share: f64,
    pub insertion_share: f64,
    /// Maximum shift, in frames, of each internal word boundary.
    pub jitter: usize,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            substitution_share: 0.8,
            deletion_share: 0.1,
            insertion_share: 0.1,
            jitter: 2,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("substitution_share", self.substitution_share),
            ("deletion_share", self.deletion_share),
            ("insertion_share", self.insertion_share),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(key, format!("{v} is outside [0, 1]")));
            }
        }
        let total = self.substitution_share + self.deletion_share + self.insertion_share;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "substitution_share",
                format!("error shares sum to {total}, expected 1"),
            ));
        }
        Ok(())
    }
}

/// Geometric preference for nearer neighbours.
fn pick_confusable<R: Rng>(vocab: &Vocabulary, token: usize, rng: &mut R) -> usize {
    let options = vocab.confusable(token);
    let weights: Vec<f64> = (0..options.len()).map(|k| 0.5f64.powi(k as i32)).collect();
    let total: f64 = weights.iter().sum();
    let mut r = rng.gen::<f64>() * total;
    for (o, w) in options.iter().zip(weights) {
        if r < w {
            return *o;
        }
        r -= w;
    }
    *options.last().expect("non-empty confusable list")
}

struct Hyp {
    token: usize,
    origin: AsrOrigin,
    span: FrameSpan,
}

pub fn apply_asr_channel(
    vocab: &Vocabulary,
    passage: &SpokenPassage,
    target_wer: f64,
    config: &ChannelConfig,
    seed: u64,
) -> Result<SpokenPassage> {
    if !(0.0..=MAX_TARGET_WER).contains(&target_wer) {
        return Err(Error::config(
            "target_wer",
            format!("{target_wer} is outside [0, {MAX_TARGET_WER}]"),
        ));
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p_sub = config.substitution_share * target_wer;
    let p_del = config.deletion_share * target_wer;
    // insertions only follow surviving words, so condition on survival to keep
    // the expected insertion count at insertion_share · target_wer per word
    let p_ins = config.insertion_share * target_wer / (1.0 - p_del);

    let mut hyps: Vec<Hyp> = Vec::with_capacity(passage.true_tokens.len() + 4);
    let mut pending: Option<FrameSpan> = None;
    for (i, (&token, &span)) in passage
        .true_tokens
        .iter()
        .zip(&passage.true_boundaries)
        .enumerate()
    {
        let r: f64 = rng.gen();
        if r < p_del {
            match hyps.last_mut() {
                Some(prev) => prev.span.end = span.end,
                None => pending = Some(pending.map_or(span, |p| p.hull(&span))),
            }
            continue;
        }
        let heard = if r < p_del + p_sub {
            pick_confusable(vocab, token, &mut rng)
        } else {
            token
        };
        let span = pending.take().map_or(span, |p| p.hull(&span));
        let insert = rng.gen::<f64>() < p_ins && span.len() >= 2;
        if insert {
            let mid = span.start + span.len().div_ceil(2);
            hyps.push(Hyp {
                token: heard,
                origin: AsrOrigin::Word(i),
                span: FrameSpan { start: span.start, end: mid },
            });
            hyps.push(Hyp {
                token: pick_confusable(vocab, token, &mut rng),
                origin: AsrOrigin::Inserted(i),
                span: FrameSpan { start: mid, end: span.end },
            });
        } else {
            hyps.push(Hyp {
                token: heard,
                origin: AsrOrigin::Word(i),
                span,
            });
        }
    }
    if hyps.is_empty() {
        // everything deleted: the recogniser still emits one word for the audio
        hyps.push(Hyp {
            token: passage.true_tokens[0],
            origin: AsrOrigin::Word(0),
            span: FrameSpan { start: 0, end: passage.total_frames() },
        });
    }

    // jitter internal boundaries left to right, keeping every interval non-empty
    let jitter = config.jitter as i64;
    let mut cuts: Vec<usize> = hyps.iter().map(|h| h.span.start).collect();
    cuts.push(passage.total_frames());
    if jitter > 0 {
        for k in 1..cuts.len() - 1 {
            let delta = rng.gen_range(-jitter..=jitter);
            let lo = cuts[k - 1] as i64 + 1;
            let hi = cuts[k + 1] as i64 - 1;
            cuts[k] = (cuts[k] as i64 + delta).clamp(lo, hi) as usize;
        }
    }

    let tokens: Vec<usize> = hyps.iter().map(|h| h.token).collect();
    let wer = compute_wer(&passage.true_tokens, &tokens)?;
    let mut out = passage.clone();
    out.asr = Some(AsrOutput {
        boundaries: cuts
            .windows(2)
            .map(|w| FrameSpan { start: w[0], end: w[1] })
            .collect(),
        origin: hyps.iter().map(|h| h.origin).collect(),
        tokens,
        wer,
        target_wer,
    });
    Ok(out)
}
