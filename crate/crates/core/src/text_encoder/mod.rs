//! Small post-LN transformer encoder with token, position and segment
//! embeddings, and a masked-token head tied to the token embedding table.

pub mod mask;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::corpus::vocab::{CLS, SEP};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_table, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;
use crate::train::{run_epochs, EpochStats, ItemLoss, TrainConfig};

pub use mask::{apply_mlm_mask, apply_mlm_mask_with, mask_slots, MaskedBatch, MaskingScheme, MlmConfig};

const EMBED_STD: f64 = 0.1;
const POSITION_SCALE: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 105,
            hidden: 64,
            layers: 2,
            heads: 2,
            ff_hidden: 128,
            max_len: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("hidden size {} is not divisible into {} heads", self.hidden, self.heads),
            ));
        }
        if self.max_len < 3 {
            return Err(Error::config("max_len", "must be at least 3"));
        }
        if self.ff_hidden == 0 {
            return Err(Error::config("ff_hidden", "must be at least 1"));
        }
        Ok(())
    }
}

/// One input position: a vocabulary token or row `k` of the supplied audio
/// embedding matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Token(usize),
    Audio(usize),
}

#[derive(Clone, Debug)]
struct Block {
    qkv: Linear,
    out: Linear,
    ln_attn: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    ln_ff: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: EncoderConfig,
    pub emb: ParamId,
    pub pos: ParamId,
    pub seg: ParamId,
    embed_ln: LayerNorm,
    blocks: Vec<Block>,
    mlm_dense: Linear,
    mlm_ln: LayerNorm,
    mlm_bias: ParamId,
}

impl TextEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let emb = store.add("text.emb", Tensor::randn(&[config.vocab_size, h], EMBED_STD, rng));
        let pos = store.add("text.pos", sinusoidal_table(config.max_len, h, POSITION_SCALE));
        let seg = store.add("text.seg", Tensor::randn(&[2, h], EMBED_STD, rng));
        let embed_ln = LayerNorm::new(store, "text.embed_ln", h);
        let blocks = (0..config.layers)
            .map(|l| Block {
                qkv: Linear::new(store, &format!("text.block{l}.qkv"), h, 3 * h, rng),
                out: Linear::new(store, &format!("text.block{l}.out"), h, h, rng),
                ln_attn: LayerNorm::new(store, &format!("text.block{l}.ln_attn"), h),
                ff_in: Linear::new(store, &format!("text.block{l}.ff_in"), h, config.ff_hidden, rng),
                ff_out: Linear::new(store, &format!("text.block{l}.ff_out"), config.ff_hidden, h, rng),
                ln_ff: LayerNorm::new(store, &format!("text.block{l}.ln_ff"), h),
            })
            .collect();
        Ok(Self {
            config,
            emb,
            pos,
            seg,
            embed_ln,
            blocks,
            mlm_dense: Linear::new(store, "text.mlm.dense", h, h, rng),
            mlm_ln: LayerNorm::new(store, "text.mlm.ln", h),
            mlm_bias: store.add("text.mlm.bias", Tensor::zeros(&[1, config.vocab_size])),
        })
    }

    /// Parameters of the embedding tables, blocks and MLM head, in creation order.
    pub fn param_names(&self, store: &ParamStore) -> Vec<String> {
        store
            .ids()
            .map(|id| store.name(id).to_string())
            .filter(|n| n.starts_with("text."))
            .collect()
    }

    /// Sum of token (or audio), position and segment rows for every slot.
    pub fn embed(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        slots: &[Slot],
        segments: &[usize],
        audio: Option<&Tensor>,
    ) -> Result<Var> {
        let n = slots.len();
        if n > self.config.max_len {
            return Err(Error::Length {
                len: n,
                max: self.config.max_len,
            });
        }
        if segments.len() != n {
            return Err(Error::shape(format!("{n} slots but {} segment ids", segments.len())));
        }
        if let Some(&bad) = segments.iter().find(|&&s| s > 1) {
            return Err(Error::Index(format!("segment id {bad} is not 0 or 1")));
        }
        let v = self.config.vocab_size;
        let emb = g.param(store, self.emb);
        let (table, audio_rows) = match audio {
            Some(z) => {
                if z.cols() != self.config.hidden {
                    return Err(Error::shape(format!(
                        "audio embeddings of width {}, hidden size is {}",
                        z.cols(),
                        self.config.hidden
                    )));
                }
                let zv = g.constant(z.clone());
                (g.concat_rows(&[emb, zv])?, z.rows())
            }
            None => (emb, 0),
        };
        let mut indices = Vec::with_capacity(n);
        for s in slots {
            indices.push(match *s {
                Slot::Token(t) if t < v => t,
                Slot::Token(t) => return Err(Error::Index(format!("token {t} outside a vocabulary of {v}"))),
                Slot::Audio(k) if k < audio_rows => v + k,
                Slot::Audio(k) => {
                    return Err(Error::Index(format!("audio row {k} of {audio_rows}")));
                }
            });
        }
        let x = g.gather_rows(table, &indices)?;
        let pos = g.param(store, self.pos);
        let pos = g.slice_rows(pos, 0, n)?;
        let seg = g.param(store, self.seg);
        let seg = g.gather_rows(seg, segments)?;
        let x = g.add(x, pos)?;
        g.add(x, seg)
    }

    pub fn embed_text(&self, g: &mut Graph, store: &ParamStore, tokens: &[usize], segments: &[usize]) -> Result<Var> {
        let slots: Vec<Slot> = tokens.iter().map(|&t| Slot::Token(t)).collect();
        self.embed(g, store, &slots, segments, None)
    }

    /// Run the transformer stack, which opens with a layer norm of the summed
    /// embeddings unless it is empty. When `trace` is given, every attention
    /// probability matrix (per layer, per head) is appended to it.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mut trace: Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let h = self.config.hidden;
        let heads = self.config.heads;
        let d = h / heads;
        let scale = 1.0 / (d as f64).sqrt();
        if self.blocks.is_empty() {
            return Ok(x);
        }
        let mut x = self.embed_ln.forward(g, store, x)?;
        for b in &self.blocks {
            let qkv = b.qkv.forward(g, store, x)?;
            let mut outs = Vec::with_capacity(heads);
            for head in 0..heads {
                let q = g.slice_cols(qkv, head * d, d)?;
                let k = g.slice_cols(qkv, h + head * d, d)?;
                let v = g.slice_cols(qkv, 2 * h + head * d, d)?;
                let scores = g.matmul_nt(q, k)?;
                let scores = g.scale(scores, scale);
                let p = g.softmax_rows(scores)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.push(g.value(p).clone());
                }
                outs.push(g.matmul(p, v)?);
            }
            let att = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
            let att = b.out.forward(g, store, att)?;
            let res = g.add(x, att)?;
            x = b.ln_attn.forward(g, store, res)?;
            let f = b.ff_in.forward(g, store, x)?;
            let f = g.gelu(f);
            let f = b.ff_out.forward(g, store, f)?;
            let res = g.add(x, f)?;
            x = b.ln_ff.forward(g, store, res)?;
        }
        Ok(x)
    }

    /// Vocabulary logits at the given rows of `hidden`.
    pub fn mlm_logits(&self, g: &mut Graph, store: &ParamStore, hidden: Var, positions: &[usize]) -> Result<Var> {
        let rows = g.gather_rows(hidden, positions)?;
        let t = self.mlm_dense.forward(g, store, rows)?;
        let t = g.gelu(t);
        let t = self.mlm_ln.forward(g, store, t)?;
        let emb = g.param(store, self.emb);
        let logits = g.matmul_nt(t, emb)?;
        let bias = g.param(store, self.mlm_bias);
        g.add_row(logits, bias)
    }

    /// Mean cross-entropy of the MLM head at the masked positions.
    pub fn mlm_loss(&self, g: &mut Graph, store: &ParamStore, batch: &MaskedBatch, audio: Option<&Tensor>) -> Result<Var> {
        let x = self.embed(g, store, &batch.input, &batch.segments, audio)?;
        let hidden = self.encode(g, store, x, None)?;
        let logits = self.mlm_logits(g, store, hidden, &batch.positions)?;
        g.cross_entropy(logits, &batch.targets)
    }

    /// Number of masked positions whose arg-max prediction is the target.
    pub fn mlm_correct(&self, store: &ParamStore, batch: &MaskedBatch, audio: Option<&Tensor>) -> Result<usize> {
        let mut g = Graph::new();
        let x = self.embed(&mut g, store, &batch.input, &batch.segments, audio)?;
        let hidden = self.encode(&mut g, store, x, None)?;
        let logits = self.mlm_logits(&mut g, store, hidden, &batch.positions)?;
        let logits = g.value(logits);
        Ok(batch
            .targets
            .iter()
            .enumerate()
            .filter(|(i, &t)| argmax(logits.row(*i)) == t)
            .count())
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// `[CLS] tokens [SEP]`, the single-segment text MLM layout.
pub fn text_sequence(tokens: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(tokens.len() + 2);
    s.push(CLS);
    s.extend_from_slice(tokens);
    s.push(SEP);
    s
}

/// Masks are redrawn every epoch from `(seed, epoch, item)`.
pub fn mask_seed(seed: u64, epoch: usize, item: usize) -> u64 {
    derive_seed(seed, &format!("mask/{epoch}/{item}"))
}

/// MLM training on text sequences (already wrapped with CLS/SEP).
pub fn pretrain_text(
    encoder: &TextEncoder,
    store: &mut ParamStore,
    corpus: &[Vec<usize>],
    mlm: &MlmConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<Vec<EpochStats>> {
    if corpus.is_empty() {
        return Err(Error::data("text corpus is empty"));
    }
    let v = encoder.config.vocab_size;
    let mut rng = stream(seed, "pretrain-text/order");
    run_epochs(store, corpus.len(), train, &mut rng, |g, s, epoch, i| {
        let batch = apply_mlm_mask_with(&corpus[i], mlm.rate, mlm.scheme, v, mask_seed(seed, epoch, i))?;
        let loss = encoder.mlm_loss(g, s, &batch, None)?;
        Ok(Some(ItemLoss { loss, parts: vec![] }))
    })
}

/// Masked-token accuracy on held-out text with MASK-only masking.
pub fn text_mlm_accuracy(
    encoder: &TextEncoder,
    store: &ParamStore,
    corpus: &[Vec<usize>],
    rate: f64,
    seed: u64,
) -> Result<f64> {
    let (mut correct, mut total) = (0, 0);
    for (i, seq) in corpus.iter().enumerate() {
        let batch = apply_mlm_mask(seq, rate, mask_seed(seed, 0, i))?;
        correct += encoder.mlm_correct(store, &batch, None)?;
        total += batch.positions.len();
    }
    if total == 0 {
        return Err(Error::data("no masked positions to score"));
    }
    Ok(correct as f64 / total as f64)
}
