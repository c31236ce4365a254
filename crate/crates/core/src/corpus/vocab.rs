//! Token inventory, acoustic prototypes and the bigram "language" of the corpus.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
/// Leading marker of every templated question.
pub const QUERY: usize = 4;
pub const NUM_SPECIAL: usize = 5;

/// Feature dimension of one audio frame (MFCC-sized).
pub const FEATURE_DIM: usize = 39;

const ANCHORS: usize = 3;
const FAMILY_SIZE: usize = 3;
const FAMILY_SPREAD: f64 = 0.7;
const CONFUSABLE_KEPT: usize = 5;
const SUCCESSOR_WEIGHTS: [f64; 3] = [0.5, 0.3, 0.2];
/// Common resampling length when comparing prototypes of different durations.
const COMPARE_FRAMES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabConfig {
    pub num_content_tokens: usize,
    /// Native prototype durations are drawn from this inclusive range.
    pub min_prototype_frames: usize,
    pub max_prototype_frames: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            num_content_tokens: 100,
            min_prototype_frames: 6,
            max_prototype_frames: 10,
        }
    }
}

/// Fixed feature trajectory of one token at its native duration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub frames: Vec<f32>,
}

impl Prototype {
    pub fn duration(&self) -> usize {
        self.frames.len() / FEATURE_DIM
    }

    /// Linear-interpolation resampling to `len` frames. At the native duration
    /// this reproduces the prototype exactly.
    pub fn resample(&self, len: usize) -> Vec<f64> {
        resample(&self.frames, self.duration(), len)
    }
}

fn resample(frames: &[f32], native: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * FEATURE_DIM];
    for t in 0..len {
        let pos = if len == 1 {
            (native - 1) as f64 / 2.0
        } else {
            t as f64 * (native - 1) as f64 / (len - 1) as f64
        };
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(native - 1);
        let w = pos - lo as f64;
        for d in 0..FEATURE_DIM {
            let a = frames[lo * FEATURE_DIM + d] as f64;
            let b = frames[hi * FEATURE_DIM + d] as f64;
            out[t * FEATURE_DIM + d] = if w == 0.0 { a } else { a + w * (b - a) };
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub config: VocabConfig,
    pub seed: u64,
    /// One prototype per content token, indexed by `token - NUM_SPECIAL`.
    pub prototypes: Vec<Prototype>,
    /// For each content token, the acoustically nearest content tokens, nearest first.
    pub confusable: Vec<Vec<usize>>,
    /// Likely successors of each content token with their weights.
    pub successors: Vec<Vec<(usize, f64)>>,
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        NUM_SPECIAL + self.config.num_content_tokens
    }

    pub fn is_content(&self, token: usize) -> bool {
        (NUM_SPECIAL..self.size()).contains(&token)
    }

    pub fn content_tokens(&self) -> std::ops::Range<usize> {
        NUM_SPECIAL..self.size()
    }

    pub fn prototype(&self, token: usize) -> Result<&Prototype> {
        if !self.is_content(token) {
            return Err(Error::contract(format!("token {token} has no prototype")));
        }
        Ok(&self.prototypes[token - NUM_SPECIAL])
    }

    pub fn confusable(&self, token: usize) -> &[usize] {
        &self.confusable[token - NUM_SPECIAL]
    }

    pub fn successors(&self, token: usize) -> &[(usize, f64)] {
        &self.successors[token - NUM_SPECIAL]
    }
}

/// Mean squared frame distance between two prototypes on a common time grid.
pub fn prototype_distance(a: &Prototype, b: &Prototype) -> f64 {
    let ra = a.resample(COMPARE_FRAMES);
    let rb = b.resample(COMPARE_FRAMES);
    ra.iter().zip(&rb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / ra.len() as f64
}

pub fn build_vocabulary(config: VocabConfig, seed: u64) -> Result<Vocabulary> {
    if config.num_content_tokens < 10 {
        return Err(Error::config(
            "num_content_tokens",
            format!("need at least 10 content tokens, got {}", config.num_content_tokens),
        ));
    }
    if config.min_prototype_frames < 1 || config.min_prototype_frames > config.max_prototype_frames {
        return Err(Error::config(
            "prototype_frames",
            format!(
                "invalid range {}..={}",
                config.min_prototype_frames, config.max_prototype_frames
            ),
        ));
    }
    let n = config.num_content_tokens;
    let mut rng = rng::stream(seed, "vocabulary");
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let spread = Normal::new(0.0, FAMILY_SPREAD).expect("valid normal");

    // tokens come in small families sharing a base trajectory, so some pairs
    // are acoustically close and others far apart
    let mut prototypes = Vec::with_capacity(n);
    let mut family: Vec<f64> = Vec::new();
    for i in 0..n {
        if i % FAMILY_SIZE == 0 {
            family = (0..ANCHORS * FEATURE_DIM).map(|_| unit.sample(&mut rng)).collect();
        }
        let anchors: Vec<f32> = family
            .iter()
            .map(|&c| (c + spread.sample(&mut rng)) as f32)
            .collect();
        let duration = rng.gen_range(config.min_prototype_frames..=config.max_prototype_frames);
        let frames = resample(&anchors, ANCHORS, duration)
            .into_iter()
            .map(|v| v as f32)
            .collect();
        prototypes.push(Prototype { frames });
    }

    let confusable = (0..n)
        .map(|i| {
            let mut ranked: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (prototype_distance(&prototypes[i], &prototypes[j]), j))
                .collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            ranked
                .into_iter()
                .take(CONFUSABLE_KEPT)
                .map(|(_, j)| j + NUM_SPECIAL)
                .collect()
        })
        .collect();

    let mut lm_rng = rng::stream(seed, "vocabulary/successors");
    let successors = (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.shuffle(&mut lm_rng);
            others
                .into_iter()
                .take(SUCCESSOR_WEIGHTS.len())
                .zip(SUCCESSOR_WEIGHTS)
                .map(|(j, w)| (j + NUM_SPECIAL, w))
                .collect()
        })
        .collect();

    Ok(Vocabulary {
        config,
        seed,
        prototypes,
        confusable,
        successors,
    })
}
