//! The shared audio/text transformer: mixed-modality MLM pre-training and
//! span-pointing QA fine-tuning. The same QA model also serves the cascade,
//! which feeds transcript tokens instead of audio embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::corpus::vocab::{CLS, SEP};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::text_encoder::{
    apply_mlm_mask_with, mask_seed, mask_slots, MaskedBatch, MlmConfig, Slot, TextEncoder,
};
use crate::train::{run_epochs, EpochStats, ItemLoss, TrainConfig};

/// Context side of a QA input: audio-word embeddings (`n×H`) or token ids.
#[derive(Clone, Debug, PartialEq)]
pub enum Context {
    Audio(Tensor),
    Tokens(Vec<usize>),
}

impl Context {
    pub fn len(&self) -> usize {
        match self {
            Context::Audio(z) => z.rows(),
            Context::Tokens(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn audio(&self) -> Option<&Tensor> {
        match self {
            Context::Audio(z) => Some(z),
            Context::Tokens(_) => None,
        }
    }
}

/// `[CLS] question [SEP] context [SEP]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QaInput {
    pub slots: Vec<Slot>,
    pub segments: Vec<usize>,
    pub context_offset: usize,
    pub context_len: usize,
}

pub fn assemble_qa_input(question: &[usize], context: &Context, max_len: usize) -> Result<QaInput> {
    let n = context.len();
    let total = question.len() + n + 3;
    if total > max_len {
        return Err(Error::Length { len: total, max: max_len });
    }
    let mut slots = Vec::with_capacity(total);
    slots.push(Slot::Token(CLS));
    slots.extend(question.iter().map(|&t| Slot::Token(t)));
    slots.push(Slot::Token(SEP));
    let context_offset = slots.len();
    match context {
        Context::Audio(_) => slots.extend((0..n).map(Slot::Audio)),
        Context::Tokens(t) => slots.extend(t.iter().map(|&t| Slot::Token(t))),
    }
    slots.push(Slot::Token(SEP));
    let mut segments = vec![0; context_offset];
    segments.resize(total, 1);
    Ok(QaInput {
        slots,
        segments,
        context_offset,
        context_len: n,
    })
}

#[derive(Clone, Debug)]
pub struct QaModel {
    pub encoder: TextEncoder,
    pub start: ParamId,
    pub end: ParamId,
}

/// Start and end log-probabilities over the context positions (`1×n` each).
pub struct QaScores {
    pub start: Var,
    pub end: Var,
}

impl QaModel {
    pub fn new<R: Rng>(store: &mut ParamStore, encoder: TextEncoder, rng: &mut R) -> Self {
        let h = encoder.config.hidden;
        let std = 1.0 / (h as f64).sqrt();
        Self {
            start: store.add("qa.start", Tensor::randn(&[1, h], std, rng)),
            end: store.add("qa.end", Tensor::randn(&[1, h], std, rng)),
            encoder,
        }
    }

    /// Dot products of S and E with the final hidden rows of the context,
    /// softmax-normalised over the context only.
    pub fn scores(&self, g: &mut Graph, store: &ParamStore, question: &[usize], context: &Context) -> Result<QaScores> {
        if context.is_empty() {
            return Err(Error::contract("empty context"));
        }
        let input = assemble_qa_input(question, context, self.encoder.config.max_len)?;
        let x = self.encoder.embed(g, store, &input.slots, &input.segments, context.audio())?;
        let hidden = self.encoder.encode(g, store, x, None)?;
        let ctx = g.slice_rows(hidden, input.context_offset, input.context_len)?;
        let s = g.param(store, self.start);
        let e = g.param(store, self.end);
        let sl = g.matmul_nt(s, ctx)?;
        let el = g.matmul_nt(e, ctx)?;
        Ok(QaScores {
            start: g.log_softmax_rows(sl)?,
            end: g.log_softmax_rows(el)?,
        })
    }

    /// `CE(start) + CE(end)` for one example.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, item: &QaItem) -> Result<Var> {
        let n = item.context.len();
        if item.gold.0 > item.gold.1 || item.gold.1 >= n {
            return Err(Error::data(format!(
                "gold span {:?} outside a context of {n} positions",
                item.gold
            )));
        }
        let sc = self.scores(g, store, &item.question, &item.context)?;
        let ls = g.slice_cols(sc.start, item.gold.0, 1)?;
        let le = g.slice_cols(sc.end, item.gold.1, 1)?;
        let both = g.add(ls, le)?;
        let total = g.sum(both);
        Ok(g.scale(total, -1.0))
    }

    /// Start and end distributions over the context.
    pub fn distributions(&self, store: &ParamStore, question: &[usize], context: &Context) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let sc = self.scores(&mut g, store, question, context)?;
        let exp = |v: &Tensor| v.data().iter().map(|x| x.exp()).collect::<Vec<f64>>();
        Ok((exp(g.value(sc.start)), exp(g.value(sc.end))))
    }

    pub fn predict(&self, store: &ParamStore, question: &[usize], context: &Context, max_span_len: usize) -> Result<SpanPrediction> {
        let (start_dist, end_dist) = self.distributions(store, question, context)?;
        let span = select_span(&start_dist, &end_dist, max_span_len)?;
        Ok(SpanPrediction {
            start_dist,
            end_dist,
            span,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub start_dist: Vec<f64>,
    pub end_dist: Vec<f64>,
    /// Inclusive context positions.
    pub span: (usize, usize),
}

/// Arg-max of `log start[i] + log end[j]` over `i ≤ j < i + max_span_len`,
/// ties to the smallest `i`, then the smallest `j`.
pub fn select_span(start: &[f64], end: &[f64], max_span_len: usize) -> Result<(usize, usize)> {
    let logs = |v: &[f64]| v.iter().map(|p| p.ln()).collect::<Vec<f64>>();
    select_span_log(&logs(start), &logs(end), max_span_len)
}

/// [`select_span`] on log-scores directly.
pub fn select_span_log(start: &[f64], end: &[f64], max_span_len: usize) -> Result<(usize, usize)> {
    let n = start.len();
    if n == 0 {
        return Err(Error::contract("span selection over zero positions"));
    }
    if end.len() != n {
        return Err(Error::shape(format!("{n} start scores but {} end scores", end.len())));
    }
    if max_span_len == 0 {
        return Err(Error::contract("max_span_len must be at least 1"));
    }
    let mut best = (f64::NEG_INFINITY, 0, 0);
    let mut found = false;
    for i in 0..n {
        for j in i..n.min(i + max_span_len) {
            let s = start[i] + end[j];
            if !found || s > best.0 {
                best = (s, i, j);
                found = true;
            }
        }
    }
    Ok((best.1, best.2))
}

/// One fine-tuning or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct QaItem {
    pub question: Vec<usize>,
    pub context: Context,
    /// Inclusive gold span in context positions.
    pub gold: (usize, usize),
}

pub fn finetune_qa(model: &QaModel, store: &mut ParamStore, items: &[QaItem], train: &TrainConfig, seed: u64, label: &str) -> Result<Vec<EpochStats>> {
    if items.is_empty() {
        return Err(Error::data("no QA examples to fine-tune on"));
    }
    let mut rng = stream(seed, label);
    run_epochs(store, items.len(), train, &mut rng, |g, s, _, i| {
        Ok(Some(ItemLoss {
            loss: model.loss(g, s, &items[i])?,
            parts: vec![],
        }))
    })
}

/// Fraction of items whose selected span equals the gold span.
pub fn span_exact_match(model: &QaModel, store: &ParamStore, items: &[QaItem], max_span_len: usize) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::data("no QA examples to score"));
    }
    let mut hits = 0;
    for item in items {
        if model.predict(store, &item.question, &item.context, max_span_len)?.span == item.gold {
            hits += 1;
        }
    }
    Ok(hits as f64 / items.len() as f64)
}

/// An utterance for mixed MLM: audio-word embeddings and the tokens they carry.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioSequence {
    pub z: Tensor,
    pub labels: Option<Vec<usize>>,
}

pub enum MlmItem<'a> {
    Text(&'a [usize]),
    Audio(&'a AudioSequence),
}

/// Masked batch for `[CLS] audio… [SEP]`; masked positions take the MASK
/// token's embedding and are scored against the word labels.
pub fn mask_audio_sequence<R: Rng>(seq: &AudioSequence, mlm: &MlmConfig, vocab_size: usize, rng: &mut R) -> Result<MaskedBatch> {
    let labels = seq
        .labels
        .as_ref()
        .ok_or_else(|| Error::data("audio item without token labels in supervised MLM"))?;
    let n = seq.z.rows();
    if labels.len() != n {
        return Err(Error::data(format!("{n} audio words but {} labels", labels.len())));
    }
    let mut slots = Vec::with_capacity(n + 2);
    slots.push(Slot::Token(CLS));
    slots.extend((0..n).map(Slot::Audio));
    slots.push(Slot::Token(SEP));
    let mut full_labels = vec![CLS];
    full_labels.extend_from_slice(labels);
    full_labels.push(SEP);
    let mut maskable = vec![true; n + 2];
    maskable[0] = false;
    maskable[n + 1] = false;
    mask_slots(&slots, &full_labels, &vec![0; n + 2], &maskable, mlm, vocab_size, rng)
}

/// Loss of one mixed-MLM item: text items reduce to the text MLM loss.
pub fn mixed_mlm_loss(
    encoder: &TextEncoder,
    g: &mut Graph,
    store: &ParamStore,
    item: &MlmItem,
    mlm: &MlmConfig,
    seed: u64,
) -> Result<Var> {
    let v = encoder.config.vocab_size;
    match item {
        MlmItem::Text(tokens) => {
            let batch = apply_mlm_mask_with(tokens, mlm.rate, mlm.scheme, v, seed)?;
            encoder.mlm_loss(g, store, &batch, None)
        }
        MlmItem::Audio(seq) => {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            let batch = mask_audio_sequence(seq, mlm, v, &mut rng)?;
            encoder.mlm_loss(g, store, &batch, Some(&seq.z))
        }
    }
}

/// MLM over the union of text sequences and audio utterances. Audio
/// embeddings are fixed inputs, so the audio encoder cannot change; the
/// token table is trainable.
pub fn pretrain_speechbert(
    encoder: &TextEncoder,
    store: &mut ParamStore,
    text: &[Vec<usize>],
    audio: &[AudioSequence],
    mlm: &MlmConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<Vec<EpochStats>> {
    if let Some(i) = audio.iter().position(|a| a.labels.is_none()) {
        return Err(Error::data(format!("audio utterance {i} carries no token labels")));
    }
    let mut rng = stream(seed, "pretrain-speechbert/order");
    let n_text = text.len();
    run_epochs(store, n_text + audio.len(), train, &mut rng, |g, s, epoch, i| {
        let item = if i < n_text {
            MlmItem::Text(&text[i])
        } else {
            MlmItem::Audio(&audio[i - n_text])
        };
        // text and audio parts of the epoch report their losses separately
        let loss = mixed_mlm_loss(encoder, g, s, &item, mlm, mask_seed(seed, epoch, i))?;
        let v = g.value(loss).item();
        let parts = if i < n_text { vec![v, 0.0] } else { vec![0.0, v] };
        Ok(Some(ItemLoss { loss, parts }))
    })
}

/// Masked-token accuracy on audio utterances (MASK-only masking).
pub fn audio_mlm_accuracy(encoder: &TextEncoder, store: &ParamStore, audio: &[AudioSequence], rate: f64, seed: u64) -> Result<f64> {
    let cfg = MlmConfig {
        rate,
        ..MlmConfig::default()
    };
    let (mut correct, mut total) = (0, 0);
    for (i, seq) in audio.iter().enumerate() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(mask_seed(seed, 0, i));
        let batch = mask_audio_sequence(seq, &cfg, encoder.config.vocab_size, &mut rng)?;
        correct += encoder.mlm_correct(store, &batch, Some(&seq.z))?;
        total += batch.positions.len();
    }
    if total == 0 {
        return Err(Error::data("no audio utterances to score"));
    }
    Ok(correct as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::QUERY;
    use crate::gradcheck::check_param_gradients;
    use crate::optim::AdamConfig;
    use crate::text_encoder::EncoderConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn qa(vocab: usize, hidden: usize, seed: u64) -> (QaModel, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = EncoderConfig {
            vocab_size: vocab,
            hidden,
            layers: 1,
            heads: 2,
            ff_hidden: 2 * hidden,
            max_len: 40,
        };
        let enc = TextEncoder::new(&mut store, cfg, &mut rng).unwrap();
        let m = QaModel::new(&mut store, enc, &mut rng);
        (m, store)
    }

    #[test]
    fn layout_arithmetic_and_segments() {
        let q = [QUERY, 10, 11];
        let ctx = Context::Tokens(vec![20, 21, 22, 23]);
        let input = assemble_qa_input(&q, &ctx, 128).unwrap();
        assert_eq!(input.slots.len(), q.len() + 4 + 3);
        assert_eq!(input.context_offset, 5);
        // independent construction: ids up to and including the first SEP are 0
        let first_sep = input.slots.iter().position(|s| *s == Slot::Token(SEP)).unwrap();
        let expected: Vec<usize> = (0..input.slots.len()).map(|i| usize::from(i > first_sep)).collect();
        assert_eq!(input.segments, expected);
        assert_eq!(input.slots.iter().filter(|s| **s == Slot::Token(SEP)).count(), 2);
        let long = Context::Tokens(vec![20; 126]);
        assert!(matches!(assemble_qa_input(&q, &long, 128), Err(Error::Length { .. })));
    }

    #[test]
    fn audio_rows_enter_raw_with_zero_tables() {
        let (m, mut store) = qa(30, 8, 1);
        store.value_mut(m.encoder.pos).data_mut().fill(0.0);
        store.value_mut(m.encoder.seg).data_mut().fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let input = assemble_qa_input(&[QUERY, 9], &Context::Audio(z.clone()), 40).unwrap();
        let mut g = Graph::new();
        let x = m.encoder.embed(&mut g, &store, &input.slots, &input.segments, Some(&z)).unwrap();
        for k in 0..3 {
            assert_eq!(g.value(x).row(input.context_offset + k), z.row(k));
        }
    }

    #[test]
    fn singleton_context_and_normalisation() {
        let (m, store) = qa(30, 8, 3);
        let (s, e) = m.distributions(&store, &[QUERY, 5], &Context::Tokens(vec![7])).unwrap();
        assert_eq!((s.clone(), e.clone()), (vec![1.0], vec![1.0]));
        let (s, e) = m.distributions(&store, &[QUERY, 5], &Context::Tokens(vec![7, 8, 9, 10, 11])).unwrap();
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((e.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let p = m.predict(&store, &[QUERY, 5], &Context::Tokens(vec![7]), 8).unwrap();
        assert_eq!(p.span, (0, 0));
    }

    fn brute_force(start: &[f64], end: &[f64], max_len: usize) -> (usize, usize) {
        let mut pairs = Vec::new();
        for i in 0..start.len() {
            for j in 0..end.len() {
                if i <= j && j - i < max_len {
                    pairs.push((start[i].ln() + end[j].ln(), i, j));
                }
            }
        }
        // stable sort keeps (i, j) order among equal scores
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        (pairs[0].1, pairs[0].2)
    }

    #[test]
    fn span_selection_examples() {
        let mut s = vec![0.01; 8];
        let mut e = vec![0.01; 8];
        s[2] = 0.9;
        e[5] = 0.9;
        assert_eq!(select_span(&s, &e, 4).unwrap(), (2, 5));
        assert_eq!(select_span(&s, &e, 8).unwrap(), (2, 5));
        // end peak before the start peak
        let mut s = vec![0.05; 6];
        let mut e = vec![0.05; 6];
        s[4] = 0.7;
        e[1] = 0.7;
        assert_eq!(select_span(&s, &e, 8).unwrap(), brute_force(&s, &e, 8));
        // window of one: best single position of the product
        let s = [0.1, 0.5, 0.4];
        let e = [0.3, 0.2, 0.5];
        assert_eq!(select_span(&s, &e, 1).unwrap(), (2, 2));
        // ties resolve to the smallest i then j
        assert_eq!(select_span(&[0.5, 0.5], &[0.5, 0.5], 2).unwrap(), (0, 0));
        assert!(select_span(&[], &[], 3).is_err());
    }

    #[test]
    fn span_selection_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..1000 {
            let n = rng.gen_range(1..=50);
            let max_len = rng.gen_range(1..=10);
            let quantised = case % 3 == 0;
            let draw = |rng: &mut ChaCha8Rng| {
                let raw: Vec<f64> = (0..n)
                    .map(|_| if quantised { rng.gen_range(1..4) as f64 } else { rng.gen::<f64>() + 1e-3 })
                    .collect();
                let z: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / z).collect::<Vec<f64>>()
            };
            let s = draw(&mut rng);
            let e = draw(&mut rng);
            assert_eq!(select_span(&s, &e, max_len).unwrap(), brute_force(&s, &e, max_len));
        }
    }

    #[test]
    fn initial_loss_is_about_two_log_n() {
        let (m, store) = qa(30, 16, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 12;
        let mut total = 0.0;
        for _ in 0..20 {
            let ctx: Vec<usize> = (0..n).map(|_| rng.gen_range(5..30)).collect();
            let item = QaItem {
                question: vec![QUERY, 6, 7],
                context: Context::Tokens(ctx),
                gold: (3, 4),
            };
            let mut g = Graph::new();
            let l = m.loss(&mut g, &store, &item).unwrap();
            total += g.value(l).item();
        }
        let mean = total / 20.0;
        assert!((mean - 2.0 * (n as f64).ln()).abs() < 0.5, "{mean}");
    }

    #[test]
    fn gold_outside_context_is_a_data_error() {
        let (m, store) = qa(30, 8, 6);
        let item = QaItem {
            question: vec![QUERY],
            context: Context::Tokens(vec![5, 6]),
            gold: (1, 2),
        };
        let mut g = Graph::new();
        assert!(matches!(m.loss(&mut g, &store, &item), Err(Error::Data(_))));
    }

    #[test]
    fn qa_loss_gradients() {
        let (m, mut store) = qa(12, 8, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let item = QaItem {
            question: vec![QUERY, 6],
            context: Context::Audio(Tensor::randn(&[4, 8], 0.5, &mut rng)),
            gold: (1, 2),
        };
        let err = check_param_gradients(&mut store, |g, s| m.loss(g, s, &item), 1e-5, 4).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn all_text_mixture_is_text_mlm() {
        let (m, store) = qa(30, 8, 9);
        let tokens = vec![CLS, 7, 8, 9, 10, SEP];
        let mlm = MlmConfig::default();
        let mut g = Graph::new();
        let a = mixed_mlm_loss(&m.encoder, &mut g, &store, &MlmItem::Text(&tokens), &mlm, 3).unwrap();
        let batch = apply_mlm_mask_with(&tokens, mlm.rate, mlm.scheme, 30, 3).unwrap();
        let b = m.encoder.mlm_loss(&mut g, &store, &batch, None).unwrap();
        assert_eq!(g.value(a).item(), g.value(b).item());
    }

    #[test]
    fn audio_masking_reaches_the_token_table() {
        let (m, mut store) = qa(30, 8, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let seq = AudioSequence {
            z: Tensor::randn(&[5, 8], 0.3, &mut rng),
            labels: Some(vec![7, 8, 9, 10, 11]),
        };
        let mut g = Graph::new();
        let l = mixed_mlm_loss(&m.encoder, &mut g, &store, &MlmItem::Audio(&seq), &MlmConfig::default(), 1).unwrap();
        g.backward(l, &mut store).unwrap();
        assert!(store.grad_norm([m.encoder.emb]) > 0.0);

        let unlabeled = AudioSequence { z: seq.z.clone(), labels: None };
        let mut g = Graph::new();
        let r = mixed_mlm_loss(&m.encoder, &mut g, &store, &MlmItem::Audio(&unlabeled), &MlmConfig::default(), 1);
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn overfits_sixteen_examples() {
        let (m, mut store) = qa(40, 32, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let items: Vec<QaItem> = (0..16)
            .map(|_| {
                let ctx: Vec<usize> = (0..10).map(|_| rng.gen_range(5..40)).collect();
                let s = rng.gen_range(1..7);
                let e = s + rng.gen_range(0..2);
                QaItem {
                    question: vec![QUERY, ctx[s - 1], ctx[e + 1]],
                    context: Context::Tokens(ctx),
                    gold: (s, e),
                }
            })
            .collect();
        let train = TrainConfig {
            epochs: 75,
            batch_size: 4,
            adam: AdamConfig { lr: 2e-3, ..AdamConfig::default() },
            warmup_steps: 0,
            clip_norm: Some(1.0),
        };
        finetune_qa(&m, &mut store, &items, &train, 0, "test").unwrap();
        assert_eq!(span_exact_match(&m, &store, &items, 8).unwrap(), 1.0);
    }
}
