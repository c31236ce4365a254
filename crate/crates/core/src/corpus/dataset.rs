//! QA examples over synthetic spoken passages.

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::audio::{synthesize_passage, AsrOrigin, AsrOutput, AudioConfig, SpokenPassage};
use super::channel::{apply_asr_channel, ChannelConfig, MAX_TARGET_WER};
use super::vocab::{build_vocabulary, VocabConfig, Vocabulary, QUERY};
use crate::error::{Error, Result};
use crate::metrics::FrameSpan;
use crate::rng::{derive_seed, indexed_stream};

const SPAN_ATTEMPTS: usize = 40;
const PASSAGE_ATTEMPTS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub vocab: VocabConfig,
    pub audio: AudioConfig,
    pub channel: ChannelConfig,
    pub min_passage_words: usize,
    pub max_passage_words: usize,
    pub max_answer_words: usize,
    /// Probability that the next passage word ignores the bigram table.
    pub lm_noise: f64,
    /// A passage at target WER `w` is synthesised with noise
    /// `noise_std · (1 + noise_wer_scale · w)`: harder recordings, more errors.
    pub noise_wer_scale: f64,
    pub train_examples: usize,
    pub train_wer: f64,
    pub test_examples_per_level: usize,
    pub test_wer_levels: Vec<f64>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab: VocabConfig::default(),
            audio: AudioConfig::default(),
            channel: ChannelConfig::default(),
            min_passage_words: 10,
            max_passage_words: 16,
            max_answer_words: 3,
            lm_noise: 0.1,
            noise_wer_scale: 1.0,
            train_examples: 1600,
            train_wer: 0.25,
            test_examples_per_level: 150,
            test_wer_levels: vec![0.05, 0.15, 0.25, 0.35, 0.45, 0.6],
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_answer_words == 0 {
            return Err(Error::config("max_answer_words", "must be at least 1"));
        }
        if self.min_passage_words < self.max_answer_words + 2 {
            return Err(Error::config(
                "min_passage_words",
                format!(
                    "{} words cannot hold a {}-word answer between two context words",
                    self.min_passage_words, self.max_answer_words
                ),
            ));
        }
        if self.max_passage_words < self.min_passage_words {
            return Err(Error::config("max_passage_words", "smaller than min_passage_words"));
        }
        if !(0.0..=1.0).contains(&self.lm_noise) {
            return Err(Error::config("lm_noise", "must lie in [0, 1]"));
        }
        if self.audio.noise_std < 0.0 || !self.audio.noise_std.is_finite() {
            return Err(Error::config("noise_std", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.audio.warp) {
            return Err(Error::config("warp", "must lie in [0, 1)"));
        }
        if self.audio.min_frames == 0 || self.audio.min_frames > self.audio.max_frames {
            return Err(Error::config("min_frames", "invalid frame range"));
        }
        for &w in std::iter::once(&self.train_wer).chain(&self.test_wer_levels) {
            if !(0.0..=MAX_TARGET_WER).contains(&w) {
                return Err(Error::config("wer", format!("{w} is outside [0, {MAX_TARGET_WER}]")));
            }
        }
        if self.test_wer_levels.is_empty() {
            return Err(Error::config("test_wer_levels", "at least one level is required"));
        }
        self.channel.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitName {
    Train,
    Test,
}

impl SplitName {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    /// Index of the passage inside its split.
    pub passage: usize,
    pub question: Vec<usize>,
    /// Inclusive word indices in the true segmentation.
    pub answer_word_span: (usize, usize),
    pub answer_frame_span: FrameSpan,
    pub answer_tokens: Vec<usize>,
    pub lost: bool,
    /// Inclusive span of the answer inside the ASR transcript, when not lost.
    pub asr_answer_span: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub name: SplitName,
    pub passages: Vec<SpokenPassage>,
    pub examples: Vec<QaExample>,
}

impl Split {
    pub fn passage_of(&self, example: &QaExample) -> &SpokenPassage {
        &self.passages[example.passage]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaDataset {
    pub config: CorpusConfig,
    pub seed: u64,
    pub vocab: Vocabulary,
    pub train: Split,
    pub test: Split,
}

impl QaDataset {
    pub fn split(&self, name: SplitName) -> &Split {
        match name {
            SplitName::Train => &self.train,
            SplitName::Test => &self.test,
        }
    }
}

/// Position of a gold answer in the ASR transcript, found through the
/// channel's word alignment. `None` means the answer is lost.
pub fn project_answer(asr: &AsrOutput, start_word: usize, answer: &[usize]) -> Option<(usize, usize)> {
    let p = asr.origin.iter().position(|o| *o == AsrOrigin::Word(start_word))?;
    let end = p + answer.len();
    (end <= asr.tokens.len() && asr.tokens[p..end] == *answer).then(|| (p, end - 1))
}

fn sample_passage_tokens<R: Rng>(vocab: &Vocabulary, len: usize, lm_noise: f64, rng: &mut R) -> Vec<usize> {
    let mut tokens = Vec::with_capacity(len);
    let mut cur = rng.gen_range(vocab.content_tokens());
    tokens.push(cur);
    while tokens.len() < len {
        cur = if rng.gen::<f64>() < lm_noise {
            rng.gen_range(vocab.content_tokens())
        } else {
            let succ = vocab.successors(cur);
            let pick = WeightedIndex::new(succ.iter().map(|s| s.1)).expect("positive weights");
            succ[pick.sample(rng)].0
        };
        tokens.push(cur);
    }
    tokens
}

/// Answer span whose two flanking words each occur once in the passage.
fn sample_answer_span<R: Rng>(tokens: &[usize], max_answer: usize, rng: &mut R) -> Option<(usize, usize)> {
    let n = tokens.len();
    let once = |t: usize| tokens.iter().filter(|&&x| x == t).count() == 1;
    for _ in 0..SPAN_ATTEMPTS {
        let len = rng.gen_range(1..=max_answer.min(n - 2));
        let s = rng.gen_range(1..=n - 1 - len);
        let e = s + len - 1;
        if once(tokens[s - 1]) && once(tokens[e + 1]) {
            return Some((s, e));
        }
    }
    None
}

/// Template question: marker, word before the answer, word after it.
pub fn build_question(tokens: &[usize], span: (usize, usize)) -> Vec<usize> {
    vec![QUERY, tokens[span.0 - 1], tokens[span.1 + 1]]
}

fn generate_example(
    vocab: &Vocabulary,
    config: &CorpusConfig,
    seed: u64,
    split: SplitName,
    index: usize,
    target_wer: f64,
) -> Result<(SpokenPassage, QaExample)> {
    let mut rng = indexed_stream(seed, split.as_str(), index as u64);
    for _ in 0..PASSAGE_ATTEMPTS {
        let len = rng.gen_range(config.min_passage_words..=config.max_passage_words);
        let tokens = sample_passage_tokens(vocab, len, config.lm_noise, &mut rng);
        let Some(span) = sample_answer_span(&tokens, config.max_answer_words, &mut rng) else {
            continue;
        };
        let audio_seed = rng.gen();
        let channel_seed = rng.gen();
        let audio = AudioConfig {
            noise_std: config.audio.noise_std * (1.0 + config.noise_wer_scale * target_wer),
            ..config.audio
        };
        let passage = synthesize_passage(vocab, &tokens, &audio, audio_seed)?;
        let passage = apply_asr_channel(vocab, &passage, target_wer, &config.channel, channel_seed)?;
        let answer_tokens = tokens[span.0..=span.1].to_vec();
        let asr_answer_span = project_answer(passage.asr()?, span.0, &answer_tokens);
        let example = QaExample {
            id: format!("{}-{index:05}", split.as_str()),
            passage: index,
            question: build_question(&tokens, span),
            answer_word_span: span,
            answer_frame_span: FrameSpan {
                start: passage.true_boundaries[span.0].start,
                end: passage.true_boundaries[span.1].end,
            },
            answer_tokens,
            lost: asr_answer_span.is_none(),
            asr_answer_span,
        };
        return Ok((passage, example));
    }
    Err(Error::config(
        "max_passage_words",
        "could not place an answer with unique context words; enlarge the vocabulary or shorten passages",
    ))
}

fn generate_split(
    vocab: &Vocabulary,
    config: &CorpusConfig,
    seed: u64,
    name: SplitName,
    wers: &[f64],
) -> Result<Split> {
    let mut passages = Vec::with_capacity(wers.len());
    let mut examples = Vec::with_capacity(wers.len());
    for (i, &w) in wers.iter().enumerate() {
        let (p, e) = generate_example(vocab, config, seed, name, i, w)?;
        passages.push(p);
        examples.push(e);
    }
    Ok(Split { name, passages, examples })
}

/// One example per passage. Test passages cycle through the WER levels.
pub fn generate_qa_dataset(config: &CorpusConfig, seed: u64) -> Result<QaDataset> {
    config.validate()?;
    let vocab = build_vocabulary(config.vocab, derive_seed(seed, "vocabulary"))?;
    let train_wers = vec![config.train_wer; config.train_examples];
    let levels = &config.test_wer_levels;
    let test_wers: Vec<f64> = (0..config.test_examples_per_level * levels.len())
        .map(|i| levels[i % levels.len()])
        .collect();
    let train = generate_split(&vocab, config, seed, SplitName::Train, &train_wers)?;
    let test = generate_split(&vocab, config, seed, SplitName::Test, &test_wers)?;
    Ok(QaDataset {
        config: config.clone(),
        seed,
        vocab,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(train_wer: f64, n: usize) -> CorpusConfig {
        CorpusConfig {
            train_examples: n,
            train_wer,
            test_examples_per_level: 2,
            test_wer_levels: vec![0.1],
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn clean_channel_loses_nothing() {
        let d = generate_qa_dataset(&small(0.0, 300), 4).unwrap();
        assert!(d.train.examples.iter().all(|e| !e.lost));
        for e in &d.train.examples {
            let (i, j) = e.asr_answer_span.unwrap();
            assert_eq!((i, j), e.answer_word_span);
        }
    }

    #[test]
    fn lost_fraction_grows_with_wer() {
        let mut prev = -1.0;
        for w in [0.1, 0.25, 0.4] {
            let d = generate_qa_dataset(&small(w, 2000), 11).unwrap();
            let lost = d.train.examples.iter().filter(|e| e.lost).count() as f64 / 2000.0;
            assert!(lost > 0.0 && lost > prev, "wer {w}: lost {lost} after {prev}");
            prev = lost;
        }
    }

    #[test]
    fn examples_satisfy_their_invariants() {
        let d = generate_qa_dataset(&small(0.4, 300), 2).unwrap();
        for split in [&d.train, &d.test] {
            for e in &split.examples {
                let p = split.passage_of(e);
                let (s, t) = e.answer_word_span;
                assert!(s >= 1 && s <= t && t + 1 < p.true_tokens.len());
                assert_eq!(e.answer_frame_span.start, p.true_boundaries[s].start);
                assert_eq!(e.answer_frame_span.end, p.true_boundaries[t].end);
                assert_eq!(e.answer_tokens, p.true_tokens[s..=t]);
                assert_eq!(e.question, build_question(&p.true_tokens, e.answer_word_span));
                for cue in &e.question[1..] {
                    assert_eq!(p.true_tokens.iter().filter(|x| *x == cue).count(), 1);
                }
                // soundness of the lost flag
                if let Some((i, j)) = e.asr_answer_span {
                    assert_eq!(p.asr().unwrap().tokens[i..=j], e.answer_tokens[..]);
                }
                assert_eq!(e.lost, e.asr_answer_span.is_none());
                let b = &p.true_boundaries;
                assert_eq!(b[0].start, 0);
                assert!(b.windows(2).all(|w| w[0].end == w[1].start));
            }
        }
    }

    #[test]
    fn deterministic_and_split_specific() {
        let a = generate_qa_dataset(&small(0.25, 20), 9).unwrap();
        assert_eq!(a, generate_qa_dataset(&small(0.25, 20), 9).unwrap());
        assert_ne!(a.train.passages[0].true_tokens, a.test.passages[0].true_tokens);
        let b = generate_qa_dataset(&small(0.25, 20), 10).unwrap();
        assert_ne!(a.train.examples, b.train.examples);
    }

    #[test]
    fn test_levels_cycle() {
        let cfg = CorpusConfig {
            train_examples: 1,
            test_examples_per_level: 3,
            test_wer_levels: vec![0.0, 0.5],
            ..CorpusConfig::default()
        };
        let d = generate_qa_dataset(&cfg, 0).unwrap();
        let targets: Vec<f64> = d.test.passages.iter().map(|p| p.asr.as_ref().unwrap().target_wer).collect();
        assert_eq!(targets, vec![0.0, 0.5, 0.0, 0.5, 0.0, 0.5]);
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let cfg = CorpusConfig {
            min_passage_words: 3,
            max_answer_words: 3,
            ..CorpusConfig::default()
        };
        assert!(matches!(generate_qa_dataset(&cfg, 0), Err(Error::Config { .. })));
        let cfg = CorpusConfig {
            train_wer: 0.9,
            ..CorpusConfig::default()
        };
        assert!(matches!(generate_qa_dataset(&cfg, 0), Err(Error::Config { .. })));
    }
}
