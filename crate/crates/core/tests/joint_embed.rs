//! Properties of a trained joint embedding on a reduced corpus.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sqa_core::config::RunConfig;
use sqa_core::corpus::audio::frames_to_tensor;
use sqa_core::corpus::{generate_qa_dataset, QaDataset};
use sqa_core::joint_embed::{
    evaluate_anchor, labeled_words, nearest_token, train_joint_embedding, AnchorReport, BoundarySource,
    JointEmbedConfig, JointEmbedder, LabeledAudio,
};
use sqa_core::params::ParamStore;
use sqa_core::tensor::Tensor;
use sqa_core::text_encoder::{pretrain_text, text_sequence, TextEncoder};
use sqa_core::train::EpochStats;

struct Fixture {
    data: QaDataset,
    emb: Tensor,
    model: JointEmbedder,
    store: ParamStore,
    trace: Vec<EpochStats>,
}

fn config() -> RunConfig {
    let mut cfg = RunConfig::from_text(
        "train_examples = 400\ntest_examples_per_level = 60\ntest_wer_levels = 0.0\n\
         text_epochs = 3\njoint_epochs = 5\njoint_words_per_epoch = 6000\n",
    )
    .unwrap();
    cfg.seed = 11;
    cfg
}

fn text_embedding(cfg: &RunConfig, data: &QaDataset) -> Tensor {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let enc = TextEncoder::new(&mut store, cfg.encoder.clone(), &mut rng).unwrap();
    let corpus: Vec<Vec<usize>> = data.train.passages.iter().map(|p| text_sequence(&p.true_tokens)).collect();
    pretrain_text(&enc, &mut store, &corpus, &cfg.mlm_config(), &cfg.text_train(), 1).unwrap();
    store.value(enc.emb).clone()
}

fn train(cfg: &RunConfig, data: &QaDataset, emb: &Tensor, lambda: f64) -> (JointEmbedder, ParamStore, Vec<EpochStats>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = JointEmbedder::new(&mut store, cfg.encoder.hidden, &mut rng);
    let jc = JointEmbedConfig { lambda, ..cfg.joint_config() };
    let words = labeled_words(&data.train.passages);
    let trace = train_joint_embedding(&model, &mut store, &words, emb, &jc, &cfg.joint_train(), 2).unwrap();
    (model, store, trace)
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = config();
        let data = generate_qa_dataset(&cfg.corpus, cfg.seed).unwrap();
        let emb = text_embedding(&cfg, &data);
        let (model, store, trace) = train(&cfg, &data, &emb, cfg.lambda);
        Fixture { data, emb, model, store, trace }
    })
}

fn held_out(f: &Fixture) -> Vec<LabeledAudio> {
    labeled_words(&f.data.test.passages).into_iter().take(1500).collect()
}

fn anchor(f: &Fixture) -> AnchorReport {
    evaluate_anchor(&f.model, &f.store, &held_out(f), &f.emb, 3).unwrap()
}

#[test]
fn both_components_decrease_over_five_epochs() {
    let t = &fixture().trace;
    assert_eq!(t.len(), 5);
    for part in 0..2 {
        for w in t.windows(2) {
            assert!(w[1].parts[part] < w[0].parts[part], "component {part}: {t:?}");
        }
    }
}

#[test]
fn reconstruction_beats_the_data_mean() {
    let r = anchor(fixture());
    assert!(r.frame_mse < r.baseline_mse, "{r:?}");
}

#[test]
fn anchor_pulls_z_to_its_token() {
    let r = anchor(fixture());
    assert!(r.mean_l1_true * 2.0 <= r.mean_l1_random, "{r:?}");
    assert!(r.nn_accuracy > 0.5, "{r:?}");
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn instances_of_a_token_are_closer_than_other_tokens() {
    let f = fixture();
    let words = held_out(f);
    let zs: Vec<Vec<f64>> = words.iter().map(|w| f.model.encode_audio(&f.store, &w.frames).unwrap().z).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut same, mut diff) = (Vec::new(), Vec::new());
    while same.len() < 500 || diff.len() < 500 {
        let (i, j) = (rng.gen_range(0..words.len()), rng.gen_range(0..words.len()));
        if i == j {
            continue;
        }
        let c = cosine(&zs[i], &zs[j]);
        if words[i].token == words[j].token {
            if same.len() < 500 {
                same.push(c);
            }
        } else if diff.len() < 500 {
            diff.push(c);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&same) > mean(&diff), "same {} diff {}", mean(&same), mean(&diff));
}

#[test]
fn jittered_boundaries_cost_less_than_a_fifth() {
    let f = fixture();
    let (mut exact, mut jittered, mut n, mut moved) = (0usize, 0usize, 0usize, 0usize);
    for p in &f.data.test.passages {
        let asr = p.asr().unwrap();
        assert_eq!(asr.tokens, p.true_tokens);
        let t = f.model.embed_utterance(&f.store, p, BoundarySource::True).unwrap();
        let a = f.model.embed_utterance(&f.store, p, BoundarySource::Asr).unwrap();
        for (k, &tok) in p.true_tokens.iter().enumerate() {
            exact += usize::from(nearest_token(t.row(k), &f.emb) == tok);
            jittered += usize::from(nearest_token(a.row(k), &f.emb) == tok);
            moved += usize::from(t.row(k) != a.row(k));
            n += 1;
        }
        let seg = frames_to_tensor(&p.segment_frames(asr.boundaries[0]));
        assert_eq!(f.model.encode_audio(&f.store, &seg).unwrap().z, a.row(0));
    }
    assert!(moved > n / 2, "jitter moved only {moved} of {n} words");
    let (exact, jittered) = (exact as f64 / n as f64, jittered as f64 / n as f64);
    assert!(jittered > 0.8 * exact, "true {exact:.3} jittered {jittered:.3}");
}

#[test]
fn without_the_anchor_only_reconstruction_improves() {
    let f = fixture();
    let cfg = config();
    let (_, _, t) = train(&cfg, &f.data, &f.emb, 0.0);
    let first = &t[0].parts;
    let last = &t[t.len() - 1].parts;
    assert!(last[0] < 0.8 * first[0], "{t:?}");
    // the anchor distance drifts with the unconstrained code instead of closing in
    let with = &f.trace[f.trace.len() - 1].parts[1];
    assert!(last[1] > 2.0 * with, "λ=0 {} vs trained {with}", last[1]);
    assert!(last[1] > 0.9 * first[1], "{t:?}");
}
