//! Text QA over recogniser transcripts, scored on the audio timeline through
//! the recogniser's word boundaries.

use crate::corpus::{QaExample, Split};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::speech_bert::{finetune_qa, Context, QaItem, QaModel, SpanPrediction};
use crate::train::{EpochStats, TrainConfig};

pub use crate::metrics::span_tokens_to_frames;

/// Training items over transcripts; examples whose answer is lost in the
/// transcript have no gold span there and are left out.
pub fn cascade_items(split: &Split) -> Result<Vec<QaItem>> {
    let mut items = Vec::new();
    for ex in &split.examples {
        let Some(gold) = ex.asr_answer_span else {
            continue;
        };
        items.push(QaItem {
            question: ex.question.clone(),
            context: Context::Tokens(split.passage_of(ex).asr()?.tokens.clone()),
            gold,
        });
    }
    Ok(items)
}

pub fn train_cascade(model: &QaModel, store: &mut ParamStore, split: &Split, train: &TrainConfig, seed: u64) -> Result<Vec<EpochStats>> {
    let items = cascade_items(split)?;
    if items.is_empty() {
        return Err(Error::data("no training example has its answer in the transcript"));
    }
    finetune_qa(model, store, &items, train, seed, "cascade")
}

pub fn cascade_predict(model: &QaModel, store: &ParamStore, question: &[usize], asr_tokens: &[usize], max_span_len: usize) -> Result<SpanPrediction> {
    model.predict(store, question, &Context::Tokens(asr_tokens.to_vec()), max_span_len)
}

/// Prediction for one test example of `split`.
pub fn cascade_predict_example(model: &QaModel, store: &ParamStore, split: &Split, ex: &QaExample, max_span_len: usize) -> Result<SpanPrediction> {
    cascade_predict(model, store, &ex.question, &split.passage_of(ex).asr()?.tokens, max_span_len)
}
