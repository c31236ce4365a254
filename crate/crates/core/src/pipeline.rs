//! Stage orchestration over a run directory. Every stage reads the
//! checkpoints of the stages it depends on, verifies they were produced under
//! the same configuration, and writes its own checkpoint, trace and reports.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::cascade::{cascade_predict_example, train_cascade};
use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::config::RunConfig;
use crate::corpus::{generate_qa_dataset, load_dataset, save_dataset, AsrOrigin, QaDataset, Split};
use crate::error::{Error, Result};
use crate::joint_embed::{evaluate_anchor, labeled_words, train_joint_embedding, AnchorReport, BoundarySource, JointEmbedder};
use crate::metrics::{
    ensemble_predict, evaluate_run, span_tokens_to_frames, transcript_tokens_in, ExamplePrediction, FrameSpan,
    MetricsReport, SystemPredictions,
};
use crate::params::ParamStore;
use crate::rng::{derive_seed, stream};
use crate::speech_bert::{audio_mlm_accuracy, finetune_qa, pretrain_speechbert, AudioSequence, Context, QaItem, QaModel, SpanPrediction};
use crate::tensor::Tensor;
use crate::text_encoder::{pretrain_text, text_mlm_accuracy, text_sequence, TextEncoder};
use crate::train::EpochStats;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    GenData,
    PretrainText,
    TrainJointEmbed,
    PretrainSpeechbert,
    FinetuneQa,
    TrainCascade,
    Eval,
    EnsembleEval,
    WerCurve,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::GenData,
        Stage::PretrainText,
        Stage::TrainJointEmbed,
        Stage::PretrainSpeechbert,
        Stage::FinetuneQa,
        Stage::TrainCascade,
        Stage::Eval,
        Stage::EnsembleEval,
        Stage::WerCurve,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::PretrainText => "pretrain-text",
            Stage::TrainJointEmbed => "train-joint-embed",
            Stage::PretrainSpeechbert => "pretrain-speechbert",
            Stage::FinetuneQa => "finetune-qa",
            Stage::TrainCascade => "train-cascade",
            Stage::Eval => "eval",
            Stage::EnsembleEval => "ensemble-eval",
            Stage::WerCurve => "wer-curve",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config("subcommand", format!("unknown stage `{s}`")))
    }
}

pub const DATA_DIR: &str = "data";
pub const CONFIG_ECHO: &str = "config.txt";
const TEXT_CKPT: &str = "text.ckpt";
const JOINT_CKPT: &str = "joint.ckpt";
const SPEECHBERT_CKPT: &str = "speechbert.ckpt";
const CASCADE_CKPT: &str = "cascade.ckpt";

fn qa_ckpt(cfg: &RunConfig) -> &'static str {
    if cfg.skip_mlm {
        "qa_skip_mlm.ckpt"
    } else {
        "qa.ckpt"
    }
}

/// File-name suffix naming the evaluation variant.
pub fn variant_suffix(cfg: &RunConfig) -> String {
    let mut s = String::new();
    if cfg.skip_mlm {
        s.push_str("_skip_mlm");
    }
    if cfg.boundary_source == BoundarySource::True {
        s.push_str("_true");
    }
    s
}

/// What a stage produced.
#[derive(Clone, Debug, Default)]
pub struct StageOutput {
    pub files: Vec<PathBuf>,
    pub trace: Vec<EpochStats>,
    pub report: Option<MetricsReport>,
    /// Reports restricted to each target WER level of the test split.
    pub levels: Vec<(f64, MetricsReport)>,
    pub anchor: Option<AnchorReport>,
    /// Held-out masked-token accuracy after an MLM stage.
    pub mlm_accuracy: Option<f64>,
    pub seconds: f64,
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>, out: &mut StageOutput) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    out.files.push(path);
    Ok(())
}

fn trace_csv(trace: &[EpochStats], parts: &[&str]) -> String {
    let mut s = String::from("epoch,items,loss");
    for p in parts {
        s.push(',');
        s.push_str(p);
    }
    s.push('\n');
    for e in trace {
        s.push_str(&format!("{},{},{:.6}", e.epoch, e.items, e.loss));
        for v in &e.parts {
            s.push_str(&format!(",{v:.6}"));
        }
        s.push('\n');
    }
    s
}

fn header(stage: Stage, cfg: &RunConfig) -> CheckpointHeader {
    CheckpointHeader {
        stage: stage.name().to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
    }
}

fn stage_seed(cfg: &RunConfig, stage: Stage) -> u64 {
    derive_seed(cfg.seed, stage.name())
}

/// Load a prerequisite checkpoint, or name the stage that makes it.
fn prerequisite(dir: &Path, file: &str, stage: Stage, cfg: &RunConfig) -> Result<Checkpoint> {
    let path = dir.join(file);
    if !path.exists() {
        return Err(Error::Dependency {
            missing: path.display().to_string(),
            stage: stage.name().to_string(),
        });
    }
    let ckpt = Checkpoint::load(&path)?;
    ckpt.expect(stage.name(), &cfg.hash())?;
    if ckpt.header.seed != cfg.seed {
        return Err(Error::Dependency {
            missing: format!("{} was written for seed {}, not {}", path.display(), ckpt.header.seed, cfg.seed),
            stage: stage.name().to_string(),
        });
    }
    Ok(ckpt)
}

fn load_data(dir: &Path, cfg: &RunConfig) -> Result<QaDataset> {
    let data_dir = dir.join(DATA_DIR);
    if !data_dir.join("corpus.json").exists() {
        return Err(Error::Dependency {
            missing: data_dir.display().to_string(),
            stage: Stage::GenData.name().to_string(),
        });
    }
    let data = load_dataset(&data_dir)?;
    if data.config != cfg.corpus || data.seed != cfg.seed {
        return Err(Error::Dependency {
            missing: format!("{} was generated under a different corpus config or seed", data_dir.display()),
            stage: Stage::GenData.name().to_string(),
        });
    }
    Ok(data)
}

fn new_text_model(cfg: &RunConfig) -> Result<(TextEncoder, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = stream(cfg.seed, "init/text");
    let enc = TextEncoder::new(&mut store, cfg.encoder.clone(), &mut rng)?;
    Ok((enc, store))
}

fn load_text_model(dir: &Path, file: &str, stage: Stage, cfg: &RunConfig) -> Result<(TextEncoder, ParamStore)> {
    let ckpt = prerequisite(dir, file, stage, cfg)?;
    let (enc, mut store) = new_text_model(cfg)?;
    ckpt.restore_into(&mut store, |_| true)?;
    Ok((enc, store))
}

fn new_joint_model(cfg: &RunConfig) -> (JointEmbedder, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = stream(cfg.seed, "init/joint");
    let jm = JointEmbedder::new(&mut store, cfg.encoder.hidden, &mut rng);
    (jm, store)
}

fn load_joint_model(dir: &Path, cfg: &RunConfig) -> Result<(JointEmbedder, ParamStore)> {
    let ckpt = prerequisite(dir, JOINT_CKPT, Stage::TrainJointEmbed, cfg)?;
    let (jm, mut store) = new_joint_model(cfg);
    ckpt.restore_into(&mut store, |_| true)?;
    Ok((jm, store))
}

/// QA head on top of a text model; both systems draw the same head init.
fn attach_qa_head(cfg: &RunConfig, enc: TextEncoder, store: &mut ParamStore) -> QaModel {
    let mut rng = stream(cfg.seed, "init/qa-head");
    QaModel::new(store, enc, &mut rng)
}

fn load_qa_model(dir: &Path, file: &str, stage: Stage, cfg: &RunConfig) -> Result<(QaModel, ParamStore)> {
    let ckpt = prerequisite(dir, file, stage, cfg)?;
    let (enc, mut store) = new_text_model(cfg)?;
    let qa = attach_qa_head(cfg, enc, &mut store);
    ckpt.restore_into(&mut store, |_| true)?;
    Ok((qa, store))
}

/// Joint embeddings of every passage of a split under one segmentation.
pub fn embed_split(jm: &JointEmbedder, store: &ParamStore, split: &Split, source: BoundarySource) -> Result<Vec<Tensor>> {
    split.passages.iter().map(|p| jm.embed_utterance(store, p, source)).collect()
}

fn text_corpus(data: &QaDataset) -> Vec<Vec<usize>> {
    data.train.passages.iter().map(|p| text_sequence(&p.true_tokens)).collect()
}

fn heldout_text(data: &QaDataset) -> Vec<Vec<usize>> {
    data.test.passages.iter().map(|p| text_sequence(&p.true_tokens)).collect()
}

fn gen_data(dir: &Path, cfg: &RunConfig, out: &mut StageOutput) -> Result<()> {
    let data = generate_qa_dataset(&cfg.corpus, cfg.seed)?;
    let data_dir = dir.join(DATA_DIR);
    save_dataset(&data, &data_dir)?;
    out.files.push(data_dir);
    let mut s = String::from("split,target_wer,examples,lost,mean_wer\n");
    for split in [&data.train, &data.test] {
        let mut levels: Vec<f64> = Vec::new();
        for ex in &split.examples {
            let t = split.passage_of(ex).asr()?.target_wer;
            if !levels.contains(&t) {
                levels.push(t);
            }
        }
        levels.sort_by(f64::total_cmp);
        for t in levels {
            let (mut n, mut lost, mut wer) = (0usize, 0usize, 0.0);
            for ex in &split.examples {
                let asr = split.passage_of(ex).asr()?;
                if asr.target_wer == t {
                    n += 1;
                    lost += usize::from(ex.lost);
                    wer += asr.wer;
                }
            }
            s.push_str(&format!("{},{t},{n},{lost},{:.6}\n", split.name.as_str(), wer / n as f64));
        }
    }
    write(dir.join("data_summary.csv"), s, out)
}

fn stage_pretrain_text(dir: &Path, cfg: &RunConfig, out: &mut StageOutput) -> Result<()> {
    let data = load_data(dir, cfg)?;
    let (enc, mut store) = new_text_model(cfg)?;
    let seed = stage_seed(cfg, Stage::PretrainText);
    out.trace = pretrain_text(&enc, &mut store, &text_corpus(&data), &cfg.mlm_config(), &cfg.text_train(), seed)?;
    store.round_to_f32();
    let acc = text_mlm_accuracy(&enc, &store, &heldout_text(&data), cfg.mask_rate, seed)?;
    out.mlm_accuracy = Some(acc);
    write(dir.join("trace_pretrain_text.csv"), trace_csv(&out.trace, &[]), out)?;
    write(dir.join("eval_pretrain_text.csv"), format!("heldout_mlm_accuracy\n{acc:.6}\n"), out)?;
    let ckpt = Checkpoint::from_store(header(Stage::PretrainText, cfg), &store);
    ckpt.save(&dir.join(TEXT_CKPT))?;
    out.files.push(dir.join(TEXT_CKPT));
    Ok(())
}

/// Held-out words for the anchor evaluation.
const ANCHOR_EVAL_WORDS: usize = 2000;

fn stage_joint(dir: &Path, cfg: &RunConfig, out: &mut StageOutput) -> Result<()> {
    let data = load_data(dir, cfg)?;
    let (enc, text_store) = load_text_model(dir, TEXT_CKPT, Stage::PretrainText, cfg)?;
    let emb = text_store.value(enc.emb).clone();
    let (jm, mut store) = new_joint_model(cfg);
    let seed = stage_seed(cfg, Stage::TrainJointEmbed);
    let words = labeled_words(&data.train.passages);
    out.trace = train_joint_embedding(&jm, &mut store, &words, &emb, &cfg.joint_config(), &cfg.joint_train(), seed)?;
    store.round_to_f32();
    let held: Vec<_> = labeled_words(&data.test.passages).into_iter().take(ANCHOR_EVAL_WORDS).collect();
    let r = evaluate_anchor(&jm, &store, &held, &emb, seed)?;
    out.anchor = Some(r);
    write(dir.join("trace_train_joint_embed.csv"), trace_csv(&out.trace, &["recons", "l1"]), out)?;
    write(
        dir.join("eval_train_joint_embed.csv"),
        format!(
            "words,nn_accuracy,mean_l1_true,mean_l1_random,frame_mse,baseline_mse\n{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.words, r.nn_accuracy, r.mean_l1_true, r.mean_l1_random, r.frame_mse, r.baseline_mse
        ),
        out,
    )?;
    Checkpoint::from_store(header(Stage::TrainJointEmbed, cfg), &store).save(&dir.join(JOINT_CKPT))?;
    out.files.push(dir.join(JOINT_CKPT));
    Ok(())
}

fn audio_sequences(zs: Vec<Tensor>, split: &Split) -> Vec<AudioSequence> {
    zs.into_iter()
        .zip(&split.passages)
        .map(|(z, p)| AudioSequence {
            z,
            labels: Some(p.true_tokens.clone()),
        })
        .collect()
}

fn stage_speechbert(dir: &Path, cfg: &RunConfig, out: &mut StageOutput) -> Result<()> {
    let data = load_data(dir, cfg)?;
    let (enc, mut store) = load_text_model(dir, TEXT_CKPT, Stage::PretrainText, cfg)?;
    let (jm, js) = load_joint_model(dir, cfg)?;
    let seed = stage_seed(cfg, Stage::PretrainSpeechbert);
    let audio = audio_sequences(embed_split(&jm, &js, &data.train, BoundarySource::True)?, &data.train);
    out.trace = pretrain_speechbert(&enc, &mut store, &text_corpus(&data), &audio, &cfg.mlm_config(), &cfg.mlm_train(), seed)?;
    store.round_to_f32();
    let held = audio_sequences(embed_split(&jm, &js, &data.test, BoundarySource::True)?, &data.test);
    let acc = audio_mlm_accuracy(&enc, &store, &held, cfg.mask_rate, seed)?;
    out.mlm_accuracy = Some(acc);
    write(dir.join("trace_pretrain_speechbert.csv"), trace_csv(&out.trace, &["text", "audio"]), out)?;
    write(dir.join("eval_pretrain_speechbert.csv"), format!("heldout_audio_mlm_accuracy\n{acc:.6}\n"), out)?;
    Checkpoint::from_store(header(Stage::PretrainSpeechbert, cfg), &store).save(&dir.join(SPEECHBERT_CKPT))?;
    out.files.push(dir.join(SPEECHBERT_CKPT));
    Ok(())
}

/// End-to-end training items: audio words under the true segmentation, with
/// gold spans in true word positions.
pub fn e2e_items(zs: &[Tensor], split: &Split) -> Vec<QaItem> {
    split
        .examples
        .iter()
        .map(|ex| QaItem {
            question: ex.question.clone(),
            context: Context::Audio(zs[ex.passage].clone()),
            gold: ex.answer_word_span,
        })
        .collect()
}

fn stage_finetune(dir: &Path, cfg: &RunConfig, out: &mut StageOutput) -> Result<()> {
    let data = load_data(dir, cfg)?;
    let (enc, mut store) = if cfg.skip_mlm {
        load_text_model(dir, TEXT_CKPT, Stage::PretrainText, cfg)?
    } else {
        load_text_model(dir, SPEECHBERT_CKPT, Stage::PretrainSpeechbert, cfg)?
    };
    let (jm, js) = load_joint_model(dir, cfg)?;
    let qa = attach_qa_head(cfg, enc, &mut store);
    let zs = embed_split(&jm, &js, &data.train, BoundarySource::True)?;
    let items = e2e_items(&zs, &data.train);
    out.trace = finetune_qa(&qa, &mut store, &items, &cfg.qa_train(), stage_seed(cfg, Stage::FinetuneQa), "finetune-qa")?;
    store.round_to_f32();
    let tag = if cfg.skip_mlm { "_skip_mlm" } else { "" };
    write(dir.join(format!("trace_finetune_qa{tag}.csv")), trace_csv(&out.trace, &[]), out)?;
    Checkpoint::from_store(header(Stage::FinetuneQa, cfg), &store).save(&dir.join(qa_ckpt(cfg)))?;
    out.files.push(dir.join(qa_ckpt(cfg)));
    Ok(())
}

fn stage_cascade(dir: &Path, cfg: &RunConfig, out: &mut StageOutput) -> Result<()> {
    let data = load_data(dir, cfg)?;
    let (enc, mut store) = load_text_model(dir, TEXT_CKPT, Stage::PretrainText, cfg)?;
    let qa = attach_qa_head(cfg, enc, &mut store);
    out.trace = train_cascade(&qa, &mut store, &data.train, &cfg.qa_train(), stage_seed(cfg, Stage::TrainCascade))?;
    store.round_to_f32();
    write(dir.join("trace_train_cascade.csv"), trace_csv(&out.trace, &[]), out)?;
    Checkpoint::from_store(header(Stage::TrainCascade, cfg), &store).save(&dir.join(CASCADE_CKPT))?;
    out.files.push(dir.join(CASCADE_CKPT));
    Ok(())
}

#[derive(Serialize)]
struct PredictionRecord<'a> {
    id: &'a str,
    start_dist: &'a [f64],
    end_dist: &'a [f64],
    span: (usize, usize),
    frame_span: (usize, usize),
}

/// Per-example distributions of one system plus its scored predictions.
pub struct SystemRun {
    pub predictions: SystemPredictions,
    pub spans: Vec<SpanPrediction>,
}

impl SystemRun {
    fn jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for (p, sp) in self.predictions.predictions.iter().zip(&self.spans) {
            let rec = PredictionRecord {
                id: &p.id,
                start_dist: &sp.start_dist,
                end_dist: &sp.end_dist,
                span: sp.span,
                frame_span: (p.frame_span.start, p.frame_span.end),
            };
            s.push_str(&serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?);
            s.push('\n');
        }
        Ok(s)
    }
}

fn segmentation(split: &Split, passage: usize, source: BoundarySource) -> Result<&[FrameSpan]> {
    let p = &split.passages[passage];
    Ok(match source {
        BoundarySource::True => &p.true_boundaries,
        BoundarySource::Asr => &p.asr()?.boundaries,
    })
}

fn answer_tokens(split: &Split, passage: usize, source: BoundarySource, span: (usize, usize), frames: &FrameSpan) -> Result<Vec<usize>> {
    let asr = split.passages[passage].asr()?;
    Ok(match source {
        BoundarySource::Asr => asr.tokens[span.0..=span.1].to_vec(),
        BoundarySource::True => transcript_tokens_in(asr, frames),
    })
}

fn to_prediction(split: &Split, ex_index: usize, source: BoundarySource, span: (usize, usize)) -> Result<ExamplePrediction> {
    let ex = &split.examples[ex_index];
    let frame_span = span_tokens_to_frames(span, segmentation(split, ex.passage, source)?)?;
    Ok(ExamplePrediction {
        id: ex.id.clone(),
        tokens: answer_tokens(split, ex.passage, source, span, &frame_span)?,
        frame_span,
    })
}

pub fn e2e_predict(qa: &QaModel, store: &ParamStore, zs: &[Tensor], split: &Split, source: BoundarySource, max_span_len: usize) -> Result<SystemRun> {
    let mut preds = Vec::with_capacity(split.examples.len());
    let mut spans = Vec::with_capacity(split.examples.len());
    for (i, ex) in split.examples.iter().enumerate() {
        let sp = qa.predict(store, &ex.question, &Context::Audio(zs[ex.passage].clone()), max_span_len)?;
        preds.push(to_prediction(split, i, source, sp.span)?);
        spans.push(sp);
    }
    Ok(SystemRun {
        predictions: SystemPredictions { system: "e2e".into(), predictions: preds },
        spans,
    })
}

pub fn cascade_predict_split(qa: &QaModel, store: &ParamStore, split: &Split, max_span_len: usize) -> Result<SystemRun> {
    let mut preds = Vec::with_capacity(split.examples.len());
    let mut spans = Vec::with_capacity(split.examples.len());
    for (i, ex) in split.examples.iter().enumerate() {
        let sp = cascade_predict_example(qa, store, split, ex, max_span_len)?;
        preds.push(to_prediction(split, i, BoundarySource::Asr, sp.span)?);
        spans.push(sp);
    }
    Ok(SystemRun {
        predictions: SystemPredictions { system: "cascade".into(), predictions: preds },
        spans,
    })
}

/// Audio position of every transcript word under the chosen segmentation.
fn alignment(split: &Split, passage: usize, source: BoundarySource) -> Result<Vec<usize>> {
    let asr = split.passages[passage].asr()?;
    Ok(match source {
        BoundarySource::Asr => (0..asr.tokens.len()).collect(),
        BoundarySource::True => asr
            .origin
            .iter()
            .map(|o| match *o {
                AsrOrigin::Word(s) | AsrOrigin::Inserted(s) => s,
            })
            .collect(),
    })
}

pub fn ensemble_split(e2e: &SystemRun, cascade: &SystemRun, split: &Split, source: BoundarySource, max_span_len: usize) -> Result<SystemPredictions> {
    let mut preds = Vec::with_capacity(split.examples.len());
    for (i, ex) in split.examples.iter().enumerate() {
        let (a, c) = (&e2e.spans[i], &cascade.spans[i]);
        let align = alignment(split, ex.passage, source)?;
        let ens = ensemble_predict(&a.start_dist, &a.end_dist, &c.start_dist, &c.end_dist, &align, max_span_len)?;
        preds.push(to_prediction(split, i, source, ens.span)?);
    }
    Ok(SystemPredictions {
        system: "ensemble".into(),
        predictions: preds,
    })
}

struct EvalRuns {
    data: QaDataset,
    e2e: SystemRun,
    cascade: SystemRun,
}

fn run_systems(dir: &Path, cfg: &RunConfig) -> Result<EvalRuns> {
    let data = load_data(dir, cfg)?;
    let (jm, js) = load_joint_model(dir, cfg)?;
    let (qa, qs) = load_qa_model(dir, qa_ckpt(cfg), Stage::FinetuneQa, cfg)?;
    let (cq, cs) = load_qa_model(dir, CASCADE_CKPT, Stage::TrainCascade, cfg)?;
    let zs = embed_split(&jm, &js, &data.test, cfg.boundary_source)?;
    let e2e = e2e_predict(&qa, &qs, &zs, &data.test, cfg.boundary_source, cfg.max_span_len)?;
    let cascade = cascade_predict_split(&cq, &cs, &data.test, cfg.max_span_len)?;
    Ok(EvalRuns { data, e2e, cascade })
}

fn write_report(dir: &Path, stem: &str, report: &MetricsReport, out: &mut StageOutput) -> Result<()> {
    write(dir.join(format!("{stem}.csv")), report.to_csv(), out)?;
    write(dir.join(format!("{stem}.txt")), report.to_string(), out)
}

/// The test examples synthesised at one target WER.
pub fn level_split(split: &Split, target_wer: f64) -> Result<Split> {
    let mut examples = Vec::new();
    for ex in &split.examples {
        if split.passage_of(ex).asr()?.target_wer == target_wer {
            examples.push(ex.clone());
        }
    }
    Ok(Split {
        name: split.name,
        passages: split.passages.clone(),
        examples,
    })
}

fn level_reports(split: &Split, levels: &[f64], systems: &[SystemPredictions], edges: &[f64]) -> Result<Vec<(f64, MetricsReport)>> {
    levels
        .iter()
        .map(|&w| Ok((w, evaluate_run(&level_split(split, w)?, systems, edges)?)))
        .collect()
}

fn levels_csv(levels: &[(f64, MetricsReport)]) -> String {
    let mut s = String::from("target_wer,system,subset,count,em,token_f1,frame_f1,aos\n");
    let cell = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
    for (w, r) in levels {
        for row in &r.subsets {
            s.push_str(&format!(
                "{w},{},{},{},{},{},{},{}\n",
                row.system,
                row.subset.as_str(),
                row.count,
                cell(row.em),
                cell(row.token_f1),
                cell(row.frame_f1),
                cell(row.aos)
            ));
        }
    }
    s
}

fn stage_eval(dir: &Path, cfg: &RunConfig, out: &mut StageOutput) -> Result<()> {
    let runs = run_systems(dir, cfg)?;
    let sfx = variant_suffix(cfg);
    write(dir.join(format!("predictions_e2e{sfx}.jsonl")), runs.e2e.jsonl()?, out)?;
    write(dir.join(format!("predictions_cascade{sfx}.jsonl")), runs.cascade.jsonl()?, out)?;
    let systems = [runs.cascade.predictions, runs.e2e.predictions];
    let report = evaluate_run(&runs.data.test, &systems, &cfg.wer_bucket_edges)?;
    write_report(dir, &format!("report{sfx}"), &report, out)?;
    let levels = level_reports(&runs.data.test, &cfg.corpus.test_wer_levels, &systems, &cfg.wer_bucket_edges)?;
    write(dir.join(format!("report_levels{sfx}.csv")), levels_csv(&levels), out)?;
    out.report = Some(report);
    out.levels = levels;
    Ok(())
}

fn stage_ensemble(dir: &Path, cfg: &RunConfig, out: &mut StageOutput) -> Result<()> {
    let runs = run_systems(dir, cfg)?;
    let ens = ensemble_split(&runs.e2e, &runs.cascade, &runs.data.test, cfg.boundary_source, cfg.max_span_len)?;
    let systems = [runs.cascade.predictions, runs.e2e.predictions, ens];
    let report = evaluate_run(&runs.data.test, &systems, &cfg.wer_bucket_edges)?;
    let sfx = variant_suffix(cfg);
    write_report(dir, &format!("ensemble{sfx}"), &report, out)?;
    let levels = level_reports(&runs.data.test, &cfg.corpus.test_wer_levels, &systems, &cfg.wer_bucket_edges)?;
    write(dir.join(format!("ensemble_levels{sfx}.csv")), levels_csv(&levels), out)?;
    out.report = Some(report);
    out.levels = levels;
    Ok(())
}

fn stage_wer_curve(dir: &Path, cfg: &RunConfig, out: &mut StageOutput) -> Result<()> {
    let runs = run_systems(dir, cfg)?;
    let systems = [runs.cascade.predictions, runs.e2e.predictions];
    let report = evaluate_run(&runs.data.test, &systems, &cfg.wer_bucket_edges)?;
    write(dir.join(format!("wer_curve{}.csv", variant_suffix(cfg))), report.wer_curve_csv(), out)?;
    out.report = Some(report);
    Ok(())
}

/// Run one stage in `dir`, writing the effective configuration alongside.
pub fn run_stage(stage: Stage, cfg: &RunConfig, dir: &Path) -> Result<StageOutput> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let echo = dir.join(CONFIG_ECHO);
    fs::write(&echo, cfg.to_text()).map_err(|e| Error::io(&echo, e))?;
    let started = Instant::now();
    let mut out = StageOutput::default();
    match stage {
        Stage::GenData => gen_data(dir, cfg, &mut out)?,
        Stage::PretrainText => stage_pretrain_text(dir, cfg, &mut out)?,
        Stage::TrainJointEmbed => stage_joint(dir, cfg, &mut out)?,
        Stage::PretrainSpeechbert => stage_speechbert(dir, cfg, &mut out)?,
        Stage::FinetuneQa => stage_finetune(dir, cfg, &mut out)?,
        Stage::TrainCascade => stage_cascade(dir, cfg, &mut out)?,
        Stage::Eval => stage_eval(dir, cfg, &mut out)?,
        Stage::EnsembleEval => stage_ensemble(dir, cfg, &mut out)?,
        Stage::WerCurve => stage_wer_curve(dir, cfg, &mut out)?,
    }
    out.seconds = started.elapsed().as_secs_f64();
    Ok(out)
}

/// Outputs of the full experiment grid.
#[derive(Debug)]
pub struct GridOutput {
    /// `(label, output)` in run order; labels carry the variant suffix.
    pub stages: Vec<(String, StageOutput)>,
}

impl GridOutput {
    pub fn get(&self, label: &str) -> Option<&StageOutput> {
        self.stages.iter().find(|(l, _)| l == label).map(|(_, o)| o)
    }

    pub fn report(&self, label: &str) -> Option<&MetricsReport> {
        self.get(label).and_then(|o| o.report.as_ref())
    }

    pub fn seconds(&self) -> f64 {
        self.stages.iter().map(|(_, o)| o.seconds).sum()
    }
}

/// Every stage on the base configuration, then the no-MLM and
/// true-boundary variants. `log` receives one line per finished stage.
pub fn run_grid(cfg: &RunConfig, dir: &Path, mut log: impl FnMut(&str)) -> Result<GridOutput> {
    let base = RunConfig {
        skip_mlm: false,
        boundary_source: BoundarySource::Asr,
        ..cfg.clone()
    };
    let skip = RunConfig { skip_mlm: true, ..base.clone() };
    let truth = RunConfig {
        boundary_source: BoundarySource::True,
        ..base.clone()
    };
    let plan: Vec<(Stage, &RunConfig)> = vec![
        (Stage::GenData, &base),
        (Stage::PretrainText, &base),
        (Stage::TrainJointEmbed, &base),
        (Stage::PretrainSpeechbert, &base),
        (Stage::FinetuneQa, &base),
        (Stage::TrainCascade, &base),
        (Stage::Eval, &base),
        (Stage::EnsembleEval, &base),
        (Stage::WerCurve, &base),
        (Stage::FinetuneQa, &skip),
        (Stage::Eval, &skip),
        (Stage::Eval, &truth),
    ];
    let mut stages = Vec::new();
    for (stage, c) in plan {
        let out = run_stage(stage, c, dir)?;
        let label = format!("{}{}", stage.name(), variant_suffix(c));
        let loss = out.trace.last().map(|e| format!(", final loss {:.4}", e.loss)).unwrap_or_default();
        log(&format!("{label}: {:.1}s{loss}", out.seconds));
        stages.push((label, out));
    }
    // the effective config echo reflects the base variant
    fs::write(dir.join(CONFIG_ECHO), base.to_text()).map_err(|e| Error::io(dir.join(CONFIG_ECHO), e))?;
    Ok(GridOutput { stages })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig::from_text(
            "train_examples = 24\ntest_examples_per_level = 4\ntest_wer_levels = 0.1, 0.5\n\
             hidden = 16\nlayers = 1\nff_hidden = 32\n\
             text_epochs = 1\njoint_epochs = 1\njoint_words_per_epoch = 60\nmlm_epochs = 1\nqa_epochs = 1\n",
        )
        .unwrap()
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("train".parse::<Stage>().is_err());
    }

    #[test]
    fn missing_prerequisites_name_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let stage_of = |r: Result<StageOutput>| match r {
            Err(Error::Dependency { stage, .. }) => stage,
            other => panic!("{other:?}"),
        };
        assert_eq!(stage_of(run_stage(Stage::PretrainText, &cfg, dir.path())), "gen-data");
        run_stage(Stage::GenData, &cfg, dir.path()).unwrap();
        assert_eq!(stage_of(run_stage(Stage::TrainJointEmbed, &cfg, dir.path())), "pretrain-text");
        run_stage(Stage::PretrainText, &cfg, dir.path()).unwrap();
        run_stage(Stage::TrainJointEmbed, &cfg, dir.path()).unwrap();
        assert_eq!(stage_of(run_stage(Stage::FinetuneQa, &cfg, dir.path())), "pretrain-speechbert");
        let skip = RunConfig { skip_mlm: true, ..cfg.clone() };
        run_stage(Stage::FinetuneQa, &skip, dir.path()).unwrap();
        assert_eq!(stage_of(run_stage(Stage::Eval, &skip, dir.path())), "train-cascade");

        let mut changed = cfg.clone();
        changed.qa.lr = 1e-3;
        assert_eq!(stage_of(run_stage(Stage::TrainCascade, &changed, dir.path())), "pretrain-text");
        let echo = fs::read_to_string(dir.path().join(CONFIG_ECHO)).unwrap();
        assert_eq!(RunConfig::from_text(&echo).unwrap(), changed);
    }

    #[test]
    fn stale_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        run_stage(Stage::GenData, &cfg, dir.path()).unwrap();
        run_stage(Stage::PretrainText, &cfg, dir.path()).unwrap();
        // same corpus, different model settings
        let mut other = cfg.clone();
        other.joint.lr = 2e-3;
        match run_stage(Stage::TrainJointEmbed, &other, dir.path()) {
            Err(Error::Dependency { stage, missing }) => {
                assert_eq!(stage, "pretrain-text");
                assert!(missing.contains("stale"));
            }
            r => panic!("{:?}", r.map(|o| o.files)),
        }
    }
}
