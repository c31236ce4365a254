//! Binary checkpoints: a small header and named f32 tensors, closed by a
//! SHA-256 of everything before it.
//!
//! ```text
//! magic "SQACKPT\0" | version u32 | stage str | config_hash str | seed u64
//! | count u32 | count × (name str | rank u32 | rank × dim u64 | f32 payload)
//! | sha256 (32 bytes)
//! ```
//! Integers and floats are little-endian; `str` is a u32 byte length then UTF-8.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SQACKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn from_store(header: CheckpointHeader, store: &ParamStore) -> Self {
        Self {
            header,
            tensors: store.named_values().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.header.stage);
        put_str(&mut out, &self.header.config_hash);
        out.extend_from_slice(&self.header.seed.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut r = Reader { bytes, at: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("checksum mismatch: file is corrupted or truncated".into()));
        }
        r.bytes = body;
        let header = CheckpointHeader {
            stage: r.string()?,
            config_hash: r.string()?,
            seed: r.u64()?,
        };
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("dimension overflows".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor `{name}` is impossibly large")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("payload overflows".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            tensors.push((name, Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?));
        }
        if r.at != body.len() {
            return Err(Error::Format(format!("{} trailing bytes after the last tensor", body.len() - r.at)));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copy every tensor into `store`; each must match a parameter by name and
    /// shape, and every parameter selected by `required` must be present.
    pub fn restore_into<F: Fn(&str) -> bool>(&self, store: &mut ParamStore, required: F) -> Result<()> {
        store.load_named(self.tensors.iter().map(|(n, t)| (n.as_str(), t)), required)
    }

    /// Check the header against the stage and configuration a reader expects.
    pub fn expect(&self, stage: &str, config_hash: &str) -> Result<()> {
        if self.header.stage != stage {
            return Err(Error::Format(format!(
                "checkpoint holds stage `{}`, expected `{stage}`",
                self.header.stage
            )));
        }
        if self.header.config_hash != config_hash {
            return Err(Error::Dependency {
                missing: format!(
                    "checkpoint for `{stage}` is stale (config {} but current is {config_hash})",
                    self.header.config_hash
                ),
                stage: stage.to_string(),
            });
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::text_encoder::{apply_mlm_mask, EncoderConfig, TextEncoder};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> (TextEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = EncoderConfig { hidden: 16, ff_hidden: 32, layers: 1, vocab_size: 30, ..EncoderConfig::default() };
        let enc = TextEncoder::new(&mut store, cfg, &mut rng).unwrap();
        (enc, store)
    }

    fn header() -> CheckpointHeader {
        CheckpointHeader { stage: "pretrain-text".into(), config_hash: "abc".into(), seed: 9 }
    }

    fn logits(enc: &TextEncoder, store: &ParamStore) -> Vec<f64> {
        let batch = apply_mlm_mask(&[1, 7, 8, 9, 10, 2], 0.5, 3).unwrap();
        let mut g = Graph::new();
        let x = enc.embed(&mut g, store, &batch.input, &batch.segments, None).unwrap();
        let h = enc.encode(&mut g, store, x, None).unwrap();
        let l = enc.mlm_logits(&mut g, store, h, &batch.positions).unwrap();
        g.value(l).data().to_vec()
    }

    #[test]
    fn round_trip_preserves_32_bit_inference() {
        let (enc, mut store) = model();
        let ckpt = Checkpoint::from_store(header(), &store);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();

        let (_, mut fresh) = model();
        fresh.value_mut(enc.emb).data_mut().fill(0.0);
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.header, header());
        back.restore_into(&mut fresh, |_| true).unwrap();
        store.round_to_f32();
        assert_eq!(logits(&enc, &fresh), logits(&enc, &store));
        assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn corruption_and_truncation_are_detected() {
        let (_, store) = model();
        let bytes = Checkpoint::from_store(header(), &store).to_bytes();
        for at in [12, bytes.len() / 2, bytes.len() - 40] {
            let mut bad = bytes.clone();
            bad[at] ^= 0x10;
            assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))), "byte {at}");
        }
        for len in [0, 7, 20, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..len]), Err(Error::Format(_))));
        }
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 2;
        match Checkpoint::from_bytes(&wrong_version) {
            Err(Error::Format(m)) => assert!(m.contains("version")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn header_mismatches() {
        let (_, store) = model();
        let c = Checkpoint::from_store(header(), &store);
        assert!(c.expect("pretrain-text", "abc").is_ok());
        assert!(matches!(c.expect("finetune-qa", "abc"), Err(Error::Format(_))));
        assert!(matches!(c.expect("pretrain-text", "def"), Err(Error::Dependency { .. })));
    }

    #[test]
    fn identical_stores_give_identical_files() {
        let (_, a) = model();
        let (_, b) = model();
        assert_eq!(
            Checkpoint::from_store(header(), &a).to_bytes(),
            Checkpoint::from_store(header(), &b).to_bytes()
        );
    }
}
