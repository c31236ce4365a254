//! Sequence autoencoder over one audio word whose bottleneck is pulled onto
//! the text embedding of the word it realises.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::corpus::audio::{frames_to_tensor, SpokenPassage};
use crate::corpus::vocab::{FEATURE_DIM, NUM_SPECIAL};
use crate::error::{Error, Result};
use crate::nn::{Linear, Lstm};
use crate::params::ParamStore;
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::train::{run_epochs, EpochStats, ItemLoss, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundarySource {
    True,
    Asr,
}

impl BoundarySource {
    pub fn as_str(&self) -> &'static str {
        match self {
            BoundarySource::True => "true",
            BoundarySource::Asr => "asr",
        }
    }
}

impl std::str::FromStr for BoundarySource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "true" => Ok(BoundarySource::True),
            "asr" => Ok(BoundarySource::Asr),
            other => Err(Error::config("boundary_source", format!("`{other}` is neither `true` nor `asr`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct JointEmbedder {
    pub hidden: usize,
    enc_fwd: Lstm,
    enc_bwd: Lstm,
    fc1: Linear,
    fc2: Linear,
    dec: Lstm,
    out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointEmbedding {
    pub z: Vec<f64>,
    pub token_label: Option<usize>,
}

/// One training or evaluation item: frames (`T×39`, row-major) and the token
/// they realise.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledAudio {
    pub frames: Tensor,
    pub token: usize,
}

impl JointEmbedder {
    pub fn new<R: Rng>(store: &mut ParamStore, hidden: usize, rng: &mut R) -> Self {
        Self {
            hidden,
            enc_fwd: Lstm::new(store, "joint.enc_fwd", FEATURE_DIM, hidden, rng),
            enc_bwd: Lstm::new(store, "joint.enc_bwd", FEATURE_DIM, hidden, rng),
            fc1: Linear::new(store, "joint.fc1", 2 * hidden, hidden, rng),
            fc2: Linear::new(store, "joint.fc2", hidden, hidden, rng),
            dec: Lstm::new(store, "joint.dec", hidden + 1, hidden, rng),
            out: Linear::new(store, "joint.out", hidden, FEATURE_DIM, rng),
        }
    }

    /// `z` (`1×H`) from frames (`T×39`): final forward and backward encoder
    /// states, concatenated, then two fully-connected layers.
    pub fn encode_graph(&self, g: &mut Graph, store: &ParamStore, frames: &Tensor) -> Result<Var> {
        if frames.shape().len() != 2 || frames.cols() != FEATURE_DIM {
            return Err(Error::shape(format!(
                "audio word of shape {:?}, expected T×{FEATURE_DIM}",
                frames.shape()
            )));
        }
        if frames.rows() == 0 {
            return Err(Error::contract("audio word has no frames"));
        }
        let x = g.constant(frames.clone());
        let (_, hf) = self.enc_fwd.run(g, store, x, None, false)?;
        let (_, hb) = self.enc_bwd.run(g, store, x, None, true)?;
        let h = g.concat_cols(&[hf, hb])?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.tanh(h);
        self.fc2.forward(g, store, h)
    }

    /// `T×39` reconstruction from `z`: the decoder starts from `h = z` and
    /// reads `[z, t/T]` at every step.
    pub fn decode_graph(&self, g: &mut Graph, store: &ParamStore, z: Var, frames: usize) -> Result<Var> {
        if frames == 0 {
            return Err(Error::contract("cannot decode zero frames"));
        }
        let zs = g.gather_rows(z, &vec![0; frames])?;
        let progress: Vec<f64> = (0..frames).map(|t| t as f64 / frames as f64).collect();
        let progress = g.constant(Tensor::new(vec![frames, 1], progress)?);
        let inputs = g.concat_cols(&[zs, progress])?;
        let (hs, _) = self.dec.run(g, store, inputs, Some(z), false)?;
        let hs = g.concat_rows(&hs)?;
        self.out.forward(g, store, hs)
    }

    pub fn encode_audio(&self, store: &ParamStore, frames: &Tensor) -> Result<JointEmbedding> {
        let mut g = Graph::new();
        let z = self.encode_graph(&mut g, store, frames)?;
        Ok(JointEmbedding {
            z: g.value(z).data().to_vec(),
            token_label: None,
        })
    }

    pub fn decode_audio(&self, store: &ParamStore, z: &[f64], frames: usize) -> Result<Tensor> {
        if z.len() != self.hidden {
            return Err(Error::shape(format!("z of width {}, expected {}", z.len(), self.hidden)));
        }
        let mut g = Graph::new();
        let zv = g.constant(Tensor::row_vector(z.to_vec()));
        let y = self.decode_graph(&mut g, store, zv, frames)?;
        Ok(g.value(y).clone())
    }

    /// Both loss terms for one word: `(Σ_t ||x_t − y_t||², ||z − Emb[token]||₁)`.
    pub fn losses(&self, g: &mut Graph, store: &ParamStore, item: &LabeledAudio, emb: &Tensor) -> Result<(Var, Var)> {
        let z = self.encode_graph(g, store, &item.frames)?;
        let y = self.decode_graph(g, store, z, item.frames.rows())?;
        let x = g.constant(item.frames.clone());
        let recon = reconstruction_loss(g, x, y)?;
        let anchor = l1_anchor_loss(g, z, item.token, emb)?;
        Ok((recon, anchor))
    }

    /// One embedding per word of `passage` under the chosen segmentation,
    /// stacked as an `n×H` matrix.
    pub fn embed_utterance(&self, store: &ParamStore, passage: &SpokenPassage, source: BoundarySource) -> Result<Tensor> {
        let mut rows = Vec::new();
        match source {
            BoundarySource::True => {
                for w in &passage.words {
                    rows.push(self.encode_audio(store, &w.to_tensor())?.z);
                }
            }
            BoundarySource::Asr => {
                for &b in &passage.asr()?.boundaries {
                    let frames = frames_to_tensor(&passage.segment_frames(b));
                    rows.push(self.encode_audio(store, &frames)?.z);
                }
            }
        }
        Ok(Tensor::from_rows(&rows))
    }
}

/// `Σ (x − y)²` over all frames and dimensions.
pub fn reconstruction_loss(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    if g.value(x).shape() != g.value(y).shape() {
        return Err(Error::shape(format!(
            "reconstruction of shape {:?} against {:?}",
            g.value(y).shape(),
            g.value(x).shape()
        )));
    }
    let d = g.sub(x, y)?;
    Ok(g.sum_squares(d))
}

/// `||z − Emb[token]||₁` with the table held constant.
pub fn l1_anchor_loss(g: &mut Graph, z: Var, token: usize, emb: &Tensor) -> Result<Var> {
    if token >= emb.rows() {
        return Err(Error::Index(format!("token {token} outside a table of {} rows", emb.rows())));
    }
    let anchor = g.constant(Tensor::row_vector(emb.row(token).to_vec()));
    let d = g.sub(z, anchor)?;
    Ok(g.abs_sum(d))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointEmbedConfig {
    pub lambda: f64,
    /// Training words drawn per epoch (all when zero or larger than the pool).
    pub words_per_epoch: usize,
}

impl Default for JointEmbedConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            words_per_epoch: 0,
        }
    }
}

/// Minimise `L_recons + λ·L_L1` with `emb` frozen. Epoch stats carry the two
/// components as `parts = [recons, l1]`.
pub fn train_joint_embedding(
    model: &JointEmbedder,
    store: &mut ParamStore,
    words: &[LabeledAudio],
    emb: &Tensor,
    config: &JointEmbedConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<Vec<EpochStats>> {
    if let Some(bad) = words.iter().find(|w| w.token >= emb.rows()) {
        return Err(Error::data(format!("audio label {} is outside the vocabulary", bad.token)));
    }
    if emb.cols() != model.hidden {
        return Err(Error::shape("embedding width differs from the joint embedding size"));
    }
    let per_epoch = if config.words_per_epoch == 0 {
        words.len()
    } else {
        config.words_per_epoch.min(words.len())
    };
    let mut pick = stream(seed, "joint-embed/subset");
    let mut rng = stream(seed, "joint-embed/order");
    let epoch_items: Vec<Vec<usize>> = (0..train.epochs)
        .map(|_| rand::seq::index::sample(&mut pick, words.len(), per_epoch).into_vec())
        .collect();
    run_epochs(store, per_epoch, train, &mut rng, |g, s, epoch, i| {
        let item = &words[epoch_items[epoch][i]];
        let (recon, anchor) = model.losses(g, s, item, emb)?;
        let parts = vec![g.value(recon).item(), g.value(anchor).item()];
        let weighted = g.scale(anchor, config.lambda);
        let loss = g.add(recon, weighted)?;
        Ok(Some(ItemLoss { loss, parts }))
    })
}

/// Content token whose embedding row is nearest to `z` in L1 distance.
pub fn nearest_token(z: &[f64], emb: &Tensor) -> usize {
    let mut best = (f64::INFINITY, NUM_SPECIAL);
    for t in NUM_SPECIAL..emb.rows() {
        let d: f64 = z.iter().zip(emb.row(t)).map(|(a, b)| (a - b).abs()).sum();
        if d < best.0 {
            best = (d, t);
        }
    }
    best.1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorReport {
    /// Fraction of words whose nearest content embedding is their own token.
    pub nn_accuracy: f64,
    pub mean_l1_true: f64,
    /// Mean L1 distance to a uniformly drawn content token.
    pub mean_l1_random: f64,
    /// Mean per-frame squared reconstruction error and the data-mean baseline.
    pub frame_mse: f64,
    pub baseline_mse: f64,
    pub words: usize,
}

pub fn evaluate_anchor(
    model: &JointEmbedder,
    store: &ParamStore,
    words: &[LabeledAudio],
    emb: &Tensor,
    seed: u64,
) -> Result<AnchorReport> {
    if words.is_empty() {
        return Err(Error::data("no words to evaluate"));
    }
    let mut rng = stream(seed, "joint-embed/eval");
    let mut mean = vec![0.0; FEATURE_DIM];
    let mut frames = 0usize;
    for w in words {
        for t in 0..w.frames.rows() {
            for (m, v) in mean.iter_mut().zip(w.frames.row(t)) {
                *m += v;
            }
        }
        frames += w.frames.rows();
    }
    mean.iter_mut().for_each(|m| *m /= frames as f64);
    let (mut hits, mut l1_true, mut l1_rand, mut sq, mut base) = (0usize, 0.0, 0.0, 0.0, 0.0);
    let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    for w in words {
        let mut g = Graph::new();
        let z = model.encode_graph(&mut g, store, &w.frames)?;
        let y = model.decode_graph(&mut g, store, z, w.frames.rows())?;
        let zv = g.value(z).data();
        if nearest_token(zv, emb) == w.token {
            hits += 1;
        }
        l1_true += l1(zv, emb.row(w.token));
        l1_rand += l1(zv, emb.row(rng.gen_range(NUM_SPECIAL..emb.rows())));
        let y = g.value(y);
        for t in 0..w.frames.rows() {
            for d in 0..FEATURE_DIM {
                let x = w.frames.at(t, d);
                sq += (x - y.at(t, d)).powi(2);
                base += (x - mean[d]).powi(2);
            }
        }
    }
    let n = words.len() as f64;
    Ok(AnchorReport {
        nn_accuracy: hits as f64 / n,
        mean_l1_true: l1_true / n,
        mean_l1_random: l1_rand / n,
        frame_mse: sq / frames as f64,
        baseline_mse: base / frames as f64,
        words: words.len(),
    })
}

/// Every true word of the given passages with its label.
pub fn labeled_words(passages: &[SpokenPassage]) -> Vec<LabeledAudio> {
    passages
        .iter()
        .flat_map(|p| p.words.iter())
        .map(|w| LabeledAudio {
            frames: w.to_tensor(),
            token: w.token_label,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(hidden: usize, seed: u64) -> (JointEmbedder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = JointEmbedder::new(&mut store, hidden, &mut rng);
        (m, store)
    }

    #[test]
    fn single_frame_and_determinism() {
        let (m, store) = model(16, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[1, FEATURE_DIM], 1.0, &mut rng);
        let a = m.encode_audio(&store, &x).unwrap();
        assert_eq!(a.z.len(), 16);
        assert!(a.z.iter().all(|v| v.is_finite()));
        assert_eq!(a, m.encode_audio(&store, &x).unwrap());
        let bad = Tensor::zeros(&[3, 13]);
        assert!(matches!(m.encode_audio(&store, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn decoder_shape_and_determinism() {
        let (m, store) = model(16, 3);
        let z = vec![0.1; 16];
        for t in [1, 5, 12] {
            let y = m.decode_audio(&store, &z, t).unwrap();
            assert_eq!(y.shape(), &[t, FEATURE_DIM]);
            assert_eq!(y, m.decode_audio(&store, &z, t).unwrap());
        }
        assert!(matches!(m.decode_audio(&store, &z, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn reconstruction_loss_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, FEATURE_DIM]));
        let y = g.constant(Tensor::filled(&[2, FEATURE_DIM], 1.0));
        let l = reconstruction_loss(&mut g, x, y).unwrap();
        assert_eq!(g.value(l).item(), 78.0);
        let same = reconstruction_loss(&mut g, x, x).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let wrong = g.constant(Tensor::zeros(&[3, FEATURE_DIM]));
        assert!(matches!(reconstruction_loss(&mut g, x, wrong), Err(Error::Shape(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::randn(&[7, FEATURE_DIM], 1.0, &mut rng);
        let b = Tensor::randn(&[7, FEATURE_DIM], 1.0, &mut rng);
        let mut oracle = 0.0;
        for t in 0..7 {
            for d in 0..FEATURE_DIM {
                oracle += (a.at(t, d) - b.at(t, d)) * (a.at(t, d) - b.at(t, d));
            }
        }
        let (av, bv) = (g.constant(a), g.constant(b));
        let l = reconstruction_loss(&mut g, av, bv).unwrap();
        assert!((g.value(l).item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn l1_anchor_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let emb = Tensor::randn(&[10, 64], 0.1, &mut rng);
        let mut g = Graph::new();
        let exact = g.constant(Tensor::row_vector(emb.row(3).to_vec()));
        let l = l1_anchor_loss(&mut g, exact, 3, &emb).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let shifted = g.constant(Tensor::row_vector(emb.row(3).iter().map(|v| v + 0.1).collect()));
        let l = l1_anchor_loss(&mut g, shifted, 3, &emb).unwrap();
        assert!((g.value(l).item() - 6.4).abs() < 1e-12);
        assert!(matches!(l1_anchor_loss(&mut g, exact, 10, &emb), Err(Error::Index(_))));

        let z = Tensor::randn(&[1, 64], 1.0, &mut rng);
        let mut oracle = 0.0;
        for j in 0..64 {
            oracle += (z.at(0, j) - emb.at(7, j)).abs();
        }
        let zv = g.constant(z);
        let l = l1_anchor_loss(&mut g, zv, 7, &emb).unwrap();
        assert!((g.value(l).item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_gradients_on_a_two_frame_word() {
        let (m, mut store) = model(4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let emb = Tensor::randn(&[8, 4], 0.5, &mut rng);
        let item = LabeledAudio {
            frames: Tensor::randn(&[2, FEATURE_DIM], 1.0, &mut rng),
            token: 6,
        };
        let err = check_param_gradients(
            &mut store,
            |g, s| {
                let (r, a) = m.losses(g, s, &item, &emb)?;
                g.add(r, a)
            },
            1e-5,
            5,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn labels_outside_the_table_are_data_errors() {
        let (m, mut store) = model(4, 8);
        let emb = Tensor::zeros(&[6, 4]);
        let words = vec![LabeledAudio {
            frames: Tensor::zeros(&[3, FEATURE_DIM]),
            token: 6,
        }];
        let r = train_joint_embedding(&m, &mut store, &words, &emb, &JointEmbedConfig::default(), &TrainConfig::default(), 0);
        assert!(matches!(r, Err(Error::Data(_))));
    }
}
