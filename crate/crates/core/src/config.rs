//! Run configuration: a line-based `key = value` file over every corpus,
//! model and stage setting.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::vocab::NUM_SPECIAL;
use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::joint_embed::{BoundarySource, JointEmbedConfig};
use crate::metrics::DEFAULT_WER_EDGES;
use crate::optim::AdamConfig;
use crate::text_encoder::{EncoderConfig, MaskingScheme, MlmConfig};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub encoder: EncoderConfig,
    pub text: StageConfig,
    pub joint: StageConfig,
    pub lambda: f64,
    pub joint_words_per_epoch: usize,
    pub mlm: StageConfig,
    pub qa: StageConfig,
    pub mask_rate: f64,
    pub masking_scheme: MaskingScheme,
    pub clip_norm: f64,
    pub warmup_steps: u64,
    pub max_span_len: usize,
    pub wer_bucket_edges: Vec<f64>,
    pub skip_mlm: bool,
    pub boundary_source: BoundarySource,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            corpus: CorpusConfig {
                train_examples: 4000,
                test_examples_per_level: 300,
                ..CorpusConfig::default()
            },
            encoder: EncoderConfig::default(),
            text: StageConfig { epochs: 8, batch_size: 4, lr: 5e-4 },
            joint: StageConfig { epochs: 5, batch_size: 8, lr: 1e-3 },
            lambda: JointEmbedConfig::default().lambda,
            joint_words_per_epoch: 6000,
            mlm: StageConfig { epochs: 3, batch_size: 4, lr: 5e-4 },
            qa: StageConfig { epochs: 12, batch_size: 4, lr: 5e-4 },
            mask_rate: 0.15,
            masking_scheme: MaskingScheme::MaskOnly,
            clip_norm: 1.0,
            warmup_steps: 0,
            max_span_len: 8,
            wer_bucket_edges: DEFAULT_WER_EDGES.to_vec(),
            skip_mlm: false,
            boundary_source: BoundarySource::Asr,
        }
    }
}

/// Keys that select a variant of a run rather than define it; they are left
/// out of the config hash so every variant can share upstream checkpoints.
pub const FLAG_KEYS: [&str; 2] = ["skip_mlm", "boundary_source"];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn list(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn scheme_name(s: MaskingScheme) -> &'static str {
    match s {
        MaskingScheme::MaskOnly => "mask",
        MaskingScheme::Bert => "bert",
    }
}

fn check(ok: bool, key: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(key, msg))
    }
}

fn check_stage(s: &StageConfig, name: &str) -> Result<()> {
    check(s.batch_size >= 1, &format!("{name}_batch_size"), "must be at least 1")?;
    check(s.lr > 0.0 && s.lr.is_finite(), &format!("{name}_lr"), "must be positive")?;
    check(s.epochs <= 1000, &format!("{name}_epochs"), "must be at most 1000")
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), "expected `key = value`"))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let c = &mut self.corpus;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "vocab_size" => {
                c.vocab.num_content_tokens = parse(key, v)?;
                // the encoder vocabulary follows the corpus vocabulary
                self.encoder.vocab_size = c.vocab.num_content_tokens + NUM_SPECIAL;
            }
            "min_prototype_frames" => c.vocab.min_prototype_frames = parse(key, v)?,
            "max_prototype_frames" => c.vocab.max_prototype_frames = parse(key, v)?,
            "noise_std" => c.audio.noise_std = parse(key, v)?,
            "warp" => c.audio.warp = parse(key, v)?,
            "min_frames" => c.audio.min_frames = parse(key, v)?,
            "max_frames" => c.audio.max_frames = parse(key, v)?,
            "noise_wer_scale" => c.noise_wer_scale = parse(key, v)?,
            "substitution_share" => c.channel.substitution_share = parse(key, v)?,
            "deletion_share" => c.channel.deletion_share = parse(key, v)?,
            "insertion_share" => c.channel.insertion_share = parse(key, v)?,
            "jitter" => c.channel.jitter = parse(key, v)?,
            "min_passage_words" => c.min_passage_words = parse(key, v)?,
            "max_passage_words" => c.max_passage_words = parse(key, v)?,
            "max_answer_words" => c.max_answer_words = parse(key, v)?,
            "lm_noise" => c.lm_noise = parse(key, v)?,
            "train_examples" => c.train_examples = parse(key, v)?,
            "train_wer" => c.train_wer = parse(key, v)?,
            "test_examples_per_level" => c.test_examples_per_level = parse(key, v)?,
            "test_wer_levels" => c.test_wer_levels = parse_list(key, v)?,
            "hidden" => self.encoder.hidden = parse(key, v)?,
            "layers" => self.encoder.layers = parse(key, v)?,
            "heads" => self.encoder.heads = parse(key, v)?,
            "ff_hidden" => self.encoder.ff_hidden = parse(key, v)?,
            "max_len" => self.encoder.max_len = parse(key, v)?,
            "text_epochs" => self.text.epochs = parse(key, v)?,
            "text_batch_size" => self.text.batch_size = parse(key, v)?,
            "text_lr" => self.text.lr = parse(key, v)?,
            "joint_epochs" => self.joint.epochs = parse(key, v)?,
            "joint_batch_size" => self.joint.batch_size = parse(key, v)?,
            "joint_lr" => self.joint.lr = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "joint_words_per_epoch" => self.joint_words_per_epoch = parse(key, v)?,
            "mlm_epochs" => self.mlm.epochs = parse(key, v)?,
            "mlm_batch_size" => self.mlm.batch_size = parse(key, v)?,
            "mlm_lr" => self.mlm.lr = parse(key, v)?,
            "qa_epochs" => self.qa.epochs = parse(key, v)?,
            "qa_batch_size" => self.qa.batch_size = parse(key, v)?,
            "qa_lr" => self.qa.lr = parse(key, v)?,
            "mask_rate" => self.mask_rate = parse(key, v)?,
            "masking_scheme" => {
                self.masking_scheme = match v {
                    "mask" => MaskingScheme::MaskOnly,
                    "bert" => MaskingScheme::Bert,
                    _ => return Err(Error::config(key, "expected `mask` or `bert`")),
                }
            }
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "max_span_len" => self.max_span_len = parse(key, v)?,
            "wer_bucket_edges" => self.wer_bucket_edges = parse_list(key, v)?,
            "skip_mlm" => self.skip_mlm = parse(key, v)?,
            "boundary_source" => self.boundary_source = parse(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Every key with its effective value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let c = &self.corpus;
        vec![
            ("seed", self.seed.to_string()),
            ("vocab_size", c.vocab.num_content_tokens.to_string()),
            ("min_prototype_frames", c.vocab.min_prototype_frames.to_string()),
            ("max_prototype_frames", c.vocab.max_prototype_frames.to_string()),
            ("noise_std", c.audio.noise_std.to_string()),
            ("warp", c.audio.warp.to_string()),
            ("min_frames", c.audio.min_frames.to_string()),
            ("max_frames", c.audio.max_frames.to_string()),
            ("noise_wer_scale", c.noise_wer_scale.to_string()),
            ("substitution_share", c.channel.substitution_share.to_string()),
            ("deletion_share", c.channel.deletion_share.to_string()),
            ("insertion_share", c.channel.insertion_share.to_string()),
            ("jitter", c.channel.jitter.to_string()),
            ("min_passage_words", c.min_passage_words.to_string()),
            ("max_passage_words", c.max_passage_words.to_string()),
            ("max_answer_words", c.max_answer_words.to_string()),
            ("lm_noise", c.lm_noise.to_string()),
            ("train_examples", c.train_examples.to_string()),
            ("train_wer", c.train_wer.to_string()),
            ("test_examples_per_level", c.test_examples_per_level.to_string()),
            ("test_wer_levels", list(&c.test_wer_levels)),
            ("hidden", self.encoder.hidden.to_string()),
            ("layers", self.encoder.layers.to_string()),
            ("heads", self.encoder.heads.to_string()),
            ("ff_hidden", self.encoder.ff_hidden.to_string()),
            ("max_len", self.encoder.max_len.to_string()),
            ("text_epochs", self.text.epochs.to_string()),
            ("text_batch_size", self.text.batch_size.to_string()),
            ("text_lr", self.text.lr.to_string()),
            ("joint_epochs", self.joint.epochs.to_string()),
            ("joint_batch_size", self.joint.batch_size.to_string()),
            ("joint_lr", self.joint.lr.to_string()),
            ("lambda", self.lambda.to_string()),
            ("joint_words_per_epoch", self.joint_words_per_epoch.to_string()),
            ("mlm_epochs", self.mlm.epochs.to_string()),
            ("mlm_batch_size", self.mlm.batch_size.to_string()),
            ("mlm_lr", self.mlm.lr.to_string()),
            ("qa_epochs", self.qa.epochs.to_string()),
            ("qa_batch_size", self.qa.batch_size.to_string()),
            ("qa_lr", self.qa.lr.to_string()),
            ("mask_rate", self.mask_rate.to_string()),
            ("masking_scheme", scheme_name(self.masking_scheme).to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("max_span_len", self.max_span_len.to_string()),
            ("wer_bucket_edges", list(&self.wer_bucket_edges)),
            ("skip_mlm", self.skip_mlm.to_string()),
            ("boundary_source", self.boundary_source.as_str().to_string()),
        ]
    }

    /// The effective configuration in the file format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 prefix over every non-flag entry.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !FLAG_KEYS.contains(&k) {
                h.update(format!("{k}={v}\n"));
            }
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        let v = &self.corpus.vocab;
        check(v.num_content_tokens >= 10, "vocab_size", "must be at least 10")?;
        check(
            v.min_prototype_frames >= 1 && v.min_prototype_frames <= v.max_prototype_frames,
            "min_prototype_frames",
            "invalid prototype duration range",
        )?;
        check(self.corpus.audio.noise_std <= 100.0, "noise_std", "must be at most 100")?;
        check(self.corpus.channel.jitter <= 50, "jitter", "must be at most 50")?;
        let e = &self.encoder;
        check(e.hidden >= 2 && e.hidden <= 1024, "hidden", "must lie in [2, 1024]")?;
        check(e.layers <= 24, "layers", "must be at most 24")?;
        check(e.heads >= 1 && e.hidden % e.heads == 0, "heads", "must divide hidden")?;
        check(e.ff_hidden >= 1, "ff_hidden", "must be at least 1")?;
        check(
            e.max_len >= self.corpus.max_passage_words * 2 + 6,
            "max_len",
            "too short for the longest question and passage",
        )?;
        check(
            e.vocab_size == self.corpus.vocab.num_content_tokens + NUM_SPECIAL,
            "vocab_size",
            "encoder vocabulary out of sync",
        )?;
        check_stage(&self.text, "text")?;
        check_stage(&self.joint, "joint")?;
        check_stage(&self.mlm, "mlm")?;
        check_stage(&self.qa, "qa")?;
        check(self.lambda >= 0.0 && self.lambda.is_finite(), "lambda", "must be finite and non-negative")?;
        check(self.mask_rate > 0.0 && self.mask_rate <= 1.0, "mask_rate", "must lie in (0, 1]")?;
        check(self.clip_norm > 0.0 && self.clip_norm.is_finite(), "clip_norm", "must be positive")?;
        check(self.max_span_len >= 1, "max_span_len", "must be at least 1")?;
        let edges = &self.wer_bucket_edges;
        check(
            edges.len() >= 2 && edges[0] == 0.0 && edges.windows(2).all(|w| w[0] < w[1]),
            "wer_bucket_edges",
            "need strictly increasing edges starting at 0",
        )?;
        Ok(())
    }

    fn train(&self, s: &StageConfig) -> TrainConfig {
        TrainConfig {
            epochs: s.epochs,
            batch_size: s.batch_size,
            adam: AdamConfig { lr: s.lr, ..AdamConfig::default() },
            warmup_steps: self.warmup_steps,
            clip_norm: Some(self.clip_norm),
        }
    }

    pub fn text_train(&self) -> TrainConfig {
        self.train(&self.text)
    }

    pub fn joint_train(&self) -> TrainConfig {
        self.train(&self.joint)
    }

    pub fn mlm_train(&self) -> TrainConfig {
        self.train(&self.mlm)
    }

    pub fn qa_train(&self) -> TrainConfig {
        self.train(&self.qa)
    }

    pub fn mlm_config(&self) -> MlmConfig {
        MlmConfig {
            rate: self.mask_rate,
            scheme: self.masking_scheme,
        }
    }

    pub fn joint_config(&self) -> JointEmbedConfig {
        JointEmbedConfig {
            lambda: self.lambda,
            words_per_epoch: self.joint_words_per_epoch,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_text("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::from_text("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn values_and_comments_parse() {
        let cfg = RunConfig::from_text("hidden = 32  # smaller\nheads=4\ntest_wer_levels = 0.1, 0.3\nskip_mlm = true\nboundary_source = true\nvocab_size = 50\n").unwrap();
        assert_eq!(cfg.encoder.hidden, 32);
        assert_eq!(cfg.encoder.heads, 4);
        assert_eq!(cfg.corpus.test_wer_levels, vec![0.1, 0.3]);
        assert!(cfg.skip_mlm);
        assert_eq!(cfg.boundary_source, BoundarySource::True);
        assert_eq!(cfg.encoder.vocab_size, 55);
    }

    #[test]
    fn bad_entries_name_their_key() {
        let key_of = |text: &str| match RunConfig::from_text(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("{other:?}"),
        };
        assert_eq!(key_of("mask_rate = 1.5"), "mask_rate");
        assert_eq!(key_of("mask_rate = 0"), "mask_rate");
        assert_eq!(key_of("bogus = 1"), "bogus");
        assert_eq!(key_of("hidden = lots"), "hidden");
        assert_eq!(key_of("heads = 3"), "heads");
        assert_eq!(key_of("qa_lr = -1"), "qa_lr");
        assert_eq!(key_of("masking_scheme = random"), "masking_scheme");
        assert_eq!(key_of("train_wer = 0.9"), "wer");
        assert_eq!(key_of("just text"), "line 1");
    }

    #[test]
    fn effective_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("noise_std", "0.37").unwrap();
        cfg.set("qa_lr", "0.00031").unwrap();
        cfg.set("masking_scheme", "bert").unwrap();
        cfg.set("wer_bucket_edges", "0, 0.25, 1").unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
        assert_eq!(cfg.entries().len(), cfg.to_text().lines().count());
    }

    #[test]
    fn hash_ignores_flags_only() {
        let base = RunConfig::default();
        let mut flagged = base.clone();
        flagged.skip_mlm = true;
        flagged.boundary_source = BoundarySource::True;
        assert_eq!(base.hash(), flagged.hash());
        let mut other = base.clone();
        other.qa.epochs += 1;
        assert_ne!(base.hash(), other.hash());
        assert_eq!(base.hash().len(), 16);
    }
}
