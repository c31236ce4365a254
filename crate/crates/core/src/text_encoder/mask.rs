use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Slot;
use crate::corpus::vocab::{MASK, NUM_SPECIAL};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskingScheme {
    /// Every selected position becomes MASK.
    MaskOnly,
    /// Selected positions become MASK 80% of the time, a random content token
    /// 10%, and stay unchanged 10%.
    Bert,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmConfig {
    pub rate: f64,
    pub scheme: MaskingScheme,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            rate: 0.15,
            scheme: MaskingScheme::MaskOnly,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub input: Vec<Slot>,
    pub segments: Vec<usize>,
    /// Strictly increasing.
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// `k` distinct maskable positions in increasing order, where `k` is
/// `rate · n` rounded stochastically (so its mean is exactly `rate · n`) and
/// raised to one when it would be zero.
pub fn choose_mask_positions<R: Rng>(maskable: &[bool], rate: f64, rng: &mut R) -> Result<Vec<usize>> {
    let candidates: Vec<usize> = (0..maskable.len()).filter(|&i| maskable[i]).collect();
    if candidates.is_empty() {
        return Err(Error::contract("sequence has no maskable position"));
    }
    let n = candidates.len();
    let expected = rate.clamp(0.0, 1.0) * n as f64;
    let whole = expected.floor();
    let k = whole as usize + usize::from(rng.gen::<f64>() < expected - whole);
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, n, k.clamp(1, n))
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Mask `slots` whose true tokens are `labels`. `vocab_size` bounds the
/// random replacements of the BERT scheme.
pub fn mask_slots<R: Rng>(
    slots: &[Slot],
    labels: &[usize],
    segments: &[usize],
    maskable: &[bool],
    config: &MlmConfig,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MaskedBatch> {
    let positions = choose_mask_positions(maskable, config.rate, rng)?;
    let mut input = slots.to_vec();
    let targets = positions.iter().map(|&p| labels[p]).collect();
    for &p in &positions {
        input[p] = match config.scheme {
            MaskingScheme::MaskOnly => Slot::Token(MASK),
            MaskingScheme::Bert => {
                let r: f64 = rng.gen();
                if r < 0.8 {
                    Slot::Token(MASK)
                } else if r < 0.9 {
                    Slot::Token(rng.gen_range(NUM_SPECIAL..vocab_size))
                } else {
                    slots[p]
                }
            }
        };
    }
    Ok(MaskedBatch {
        input,
        segments: segments.to_vec(),
        positions,
        targets,
    })
}

/// Mask a token sequence (single segment). Special tokens are never masked.
pub fn apply_mlm_mask(tokens: &[usize], rate: f64, seed: u64) -> Result<MaskedBatch> {
    apply_mlm_mask_with(tokens, rate, MaskingScheme::MaskOnly, usize::MAX, seed)
}

pub fn apply_mlm_mask_with(
    tokens: &[usize],
    rate: f64,
    scheme: MaskingScheme,
    vocab_size: usize,
    seed: u64,
) -> Result<MaskedBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots: Vec<Slot> = tokens.iter().map(|&t| Slot::Token(t)).collect();
    let maskable: Vec<bool> = tokens.iter().map(|&t| t >= NUM_SPECIAL).collect();
    mask_slots(
        &slots,
        tokens,
        &vec![0; tokens.len()],
        &maskable,
        &MlmConfig { rate, scheme },
        vocab_size,
        &mut rng,
    )
}
