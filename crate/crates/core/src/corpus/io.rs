//! On-disk dataset: `corpus.json` (config, seed, vocabulary), and per split a
//! JSON-Lines metadata file plus a raw little-endian f32 feature file,
//! frame-major, addressed by per-word frame offsets.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::audio::{AsrOrigin, AsrOutput, AudioWord, SpokenPassage};
use super::dataset::{CorpusConfig, QaDataset, QaExample, Split, SplitName};
use super::vocab::{Vocabulary, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::metrics::FrameSpan;

#[derive(Serialize, Deserialize)]
struct CorpusMeta {
    config: CorpusConfig,
    seed: u64,
    vocab: Vocabulary,
}

#[derive(Serialize, Deserialize)]
struct Record {
    example: QaExample,
    true_tokens: Vec<usize>,
    true_boundaries: Vec<FrameSpan>,
    /// Start of each word in the feature file, in frames.
    word_offsets: Vec<usize>,
    word_frames: Vec<usize>,
    asr_tokens: Vec<usize>,
    asr_boundaries: Vec<FrameSpan>,
    asr_origin: Vec<AsrOrigin>,
    wer: f64,
    target_wer: f64,
}

pub fn split_paths(dir: &Path, name: SplitName) -> (std::path::PathBuf, std::path::PathBuf) {
    (
        dir.join(format!("{}.jsonl", name.as_str())),
        dir.join(format!("{}.f32", name.as_str())),
    )
}

fn write_split(dir: &Path, split: &Split) -> Result<()> {
    let (meta_path, feat_path) = split_paths(dir, split.name);
    let mut meta = BufWriter::new(File::create(&meta_path).map_err(|e| Error::io(&meta_path, e))?);
    let mut feats = BufWriter::new(File::create(&feat_path).map_err(|e| Error::io(&feat_path, e))?);
    let mut offset = 0;
    for example in &split.examples {
        let p = split.passage_of(example);
        let asr = p.asr()?;
        let mut word_offsets = Vec::with_capacity(p.words.len());
        for w in &p.words {
            word_offsets.push(offset);
            offset += w.num_frames();
            for v in &w.frames {
                feats.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&feat_path, e))?;
            }
        }
        let record = Record {
            example: example.clone(),
            true_tokens: p.true_tokens.clone(),
            true_boundaries: p.true_boundaries.clone(),
            word_offsets,
            word_frames: p.words.iter().map(AudioWord::num_frames).collect(),
            asr_tokens: asr.tokens.clone(),
            asr_boundaries: asr.boundaries.clone(),
            asr_origin: asr.origin.clone(),
            wer: asr.wer,
            target_wer: asr.target_wer,
        };
        let line = serde_json::to_string(&record).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(meta, "{line}").map_err(|e| Error::io(&meta_path, e))?;
    }
    meta.flush().map_err(|e| Error::io(&meta_path, e))?;
    feats.flush().map_err(|e| Error::io(&feat_path, e))?;
    Ok(())
}

fn read_split(dir: &Path, name: SplitName) -> Result<Split> {
    let (meta_path, feat_path) = split_paths(dir, name);
    let bytes = fs::read(&feat_path).map_err(|e| Error::io(&feat_path, e))?;
    if bytes.len() % (4 * FEATURE_DIM) != 0 {
        return Err(Error::Format(format!(
            "{} holds {} bytes, not a whole number of frames",
            feat_path.display(),
            bytes.len()
        )));
    }
    let features: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let total_frames = features.len() / FEATURE_DIM;

    let file = File::open(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut passages = Vec::new();
    let mut examples = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&meta_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", meta_path.display(), n + 1)))?;
        if r.word_offsets.len() != r.true_tokens.len() || r.word_frames.len() != r.true_tokens.len() {
            return Err(Error::Format(format!("{}:{}: word count mismatch", meta_path.display(), n + 1)));
        }
        let mut words = Vec::with_capacity(r.true_tokens.len());
        for ((&token, &off), (&len, b)) in r
            .true_tokens
            .iter()
            .zip(&r.word_offsets)
            .zip(r.word_frames.iter().zip(&r.true_boundaries))
        {
            if off + len > total_frames || len != b.len() {
                return Err(Error::Format(format!(
                    "{}:{}: word frames outside the feature file",
                    meta_path.display(),
                    n + 1
                )));
            }
            words.push(AudioWord {
                frames: features[off * FEATURE_DIM..(off + len) * FEATURE_DIM].to_vec(),
                token_label: token,
                frame_offset: b.start,
            });
        }
        if r.example.passage != passages.len() {
            return Err(Error::Format(format!("{}:{}: passages out of order", meta_path.display(), n + 1)));
        }
        passages.push(SpokenPassage {
            words,
            true_tokens: r.true_tokens,
            true_boundaries: r.true_boundaries,
            asr: Some(AsrOutput {
                tokens: r.asr_tokens,
                boundaries: r.asr_boundaries,
                origin: r.asr_origin,
                wer: r.wer,
                target_wer: r.target_wer,
            }),
        });
        examples.push(r.example);
    }
    Ok(Split { name, passages, examples })
}

pub fn save_dataset(dataset: &QaDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = CorpusMeta {
        config: dataset.config.clone(),
        seed: dataset.seed,
        vocab: dataset.vocab.clone(),
    };
    let path = dir.join("corpus.json");
    let text = serde_json::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    write_split(dir, &dataset.train)?;
    write_split(dir, &dataset.test)
}

pub fn load_dataset(dir: &Path) -> Result<QaDataset> {
    let path = dir.join("corpus.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CorpusMeta =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(QaDataset {
        config: meta.config,
        seed: meta.seed,
        vocab: meta.vocab,
        train: read_split(dir, SplitName::Train)?,
        test: read_split(dir, SplitName::Test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::dataset::generate_qa_dataset;

    fn dataset() -> QaDataset {
        let cfg = CorpusConfig {
            train_examples: 30,
            test_examples_per_level: 5,
            test_wer_levels: vec![0.0, 0.4],
            ..CorpusConfig::default()
        };
        generate_qa_dataset(&cfg, 17).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let d = dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
        let (_, feat) = split_paths(dir.path(), SplitName::Train);
        let frames: usize = d.train.passages.iter().map(|p| p.total_frames()).sum();
        assert_eq!(fs::metadata(feat).unwrap().len() as usize, frames * FEATURE_DIM * 4);
    }

    #[test]
    fn truncated_feature_file_is_a_format_error() {
        let d = dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let (_, feat) = split_paths(dir.path(), SplitName::Test);
        let bytes = fs::read(&feat).unwrap();
        fs::write(&feat, &bytes[..bytes.len() - 4 * FEATURE_DIM]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
        fs::write(&feat, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
    }
}
