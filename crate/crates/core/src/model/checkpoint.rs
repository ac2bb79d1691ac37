//! Versioned binary checkpoints.
//!
//! Layout: the magic bytes `RXF1`, a little-endian `u64` giving the length of
//! a JSON metadata document, the document itself, then every tensor listed in
//! the metadata as little-endian `f64` values in declared order.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::params::ModelParameters;
use super::spec::ArchitectureSpec;
use super::train::OptimizerState;
use crate::error::{Error, Result};
use crate::tensor::ops::ChannelStats;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RXF1";
pub const FORMAT_VERSION: u32 = 1;

/// Position of a ChaCha generator, enough to resume its stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position, decimal string (u128).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &rand_chacha::ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<rand_chacha::ChaCha8Rng> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos: u128 = self.word_pos.parse().map_err(|_| Error::BadFormat("rng word position".into()))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParameters,
    pub optimizer: Option<OptimizerState>,
    pub epoch: usize,
    pub rng: Option<RngState>,
    /// Fingerprint of the herb vocabulary the model was trained against.
    pub vocab_hash: Option<u64>,
}

impl Checkpoint {
    pub fn new(params: ModelParameters) -> Self {
        Checkpoint { params, optimizer: None, epoch: 0, rng: None, vocab_hash: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    RunningMean,
    RunningVar,
    OptimFirst,
    OptimSecond,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    role: Role,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    version: u32,
    spec: ArchitectureSpec,
    epoch: usize,
    vocab_hash: Option<u64>,
    rng: Option<RngState>,
    optimizer_step: Option<u64>,
    entries: Vec<Entry>,
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut payload: Vec<&[f64]> = Vec::new();
    for (name, t) in &ckpt.params.tensors {
        entries.push(Entry { name: name.clone(), shape: t.shape().to_vec(), role: Role::Param });
        payload.push(t.data());
    }
    for (name, s) in &ckpt.params.running {
        entries.push(Entry { name: name.clone(), shape: vec![s.mean.len()], role: Role::RunningMean });
        payload.push(&s.mean);
        entries.push(Entry { name: name.clone(), shape: vec![s.var.len()], role: Role::RunningVar });
        payload.push(&s.var);
    }
    if let Some(opt) = &ckpt.optimizer {
        for (role, map) in [(Role::OptimFirst, &opt.first), (Role::OptimSecond, &opt.second)] {
            for (name, t) in map {
                entries.push(Entry { name: name.clone(), shape: t.shape().to_vec(), role });
                payload.push(t.data());
            }
        }
    }
    let meta = Metadata {
        version: FORMAT_VERSION,
        spec: ckpt.params.spec.clone(),
        epoch: ckpt.epoch,
        vocab_hash: ckpt.vocab_hash,
        rng: ckpt.rng.clone(),
        optimizer_step: ckpt.optimizer.as_ref().map(|o| o.step),
        entries,
    };
    let doc = serde_json::to_vec(&meta)?;
    let values: usize = payload.iter().map(|p| p.len()).sum();
    let mut out = Vec::with_capacity(12 + doc.len() + values * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(doc.len() as u64).to_le_bytes());
    out.extend_from_slice(&doc);
    for chunk in payload {
        for v in chunk {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses checkpoint bytes, verifying magic, version, lengths and shapes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadFormat("missing RXF1 magic".into()));
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated("metadata length".into()));
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let doc = bytes
        .get(12..12usize.saturating_add(len))
        .ok_or_else(|| Error::Truncated(format!("metadata needs {len} bytes")))?;
    let meta: Metadata =
        serde_json::from_slice(doc).map_err(|e| Error::BadFormat(format!("metadata document: {e}")))?;
    if meta.version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: meta.version, expected: FORMAT_VERSION });
    }
    let mut rest = &bytes[12 + len..];
    let expected: usize = meta.entries.iter().map(|e| e.shape.iter().product::<usize>() * 8).sum();
    if rest.len() < expected {
        return Err(Error::Truncated(format!("payload has {} bytes, metadata declares {expected}", rest.len())));
    }
    if rest.len() > expected {
        return Err(Error::BadFormat(format!("{} trailing bytes after payload", rest.len() - expected)));
    }

    let mut tensors = IndexMap::new();
    let mut running: IndexMap<String, ChannelStats> = IndexMap::new();
    let mut first = IndexMap::new();
    let mut second = IndexMap::new();
    for e in meta.entries {
        let n: usize = e.shape.iter().product();
        let (head, tail) = rest.split_at(n * 8);
        rest = tail;
        let values: Vec<f64> = head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        match e.role {
            Role::Param => {
                tensors.insert(e.name, Tensor::new(e.shape, values)?);
            }
            Role::RunningMean => {
                running.entry(e.name).or_insert_with(|| ChannelStats { mean: vec![], var: vec![] }).mean = values;
            }
            Role::RunningVar => {
                running.entry(e.name).or_insert_with(|| ChannelStats { mean: vec![], var: vec![] }).var = values;
            }
            Role::OptimFirst => {
                first.insert(e.name, Tensor::new(e.shape, values)?);
            }
            Role::OptimSecond => {
                second.insert(e.name, Tensor::new(e.shape, values)?);
            }
        }
    }
    let params = ModelParameters { spec: meta.spec, tensors, running };
    params.spec.validate().map_err(|e| Error::SpecMismatch(format!("embedded spec invalid: {e}")))?;
    params.check_consistent()?;
    let optimizer = meta.optimizer_step.map(|step| OptimizerState { step, first, second });
    Ok(Checkpoint { params, optimizer, epoch: meta.epoch, rng: meta.rng, vocab_hash: meta.vocab_hash })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads a checkpoint and requires its architecture to equal `expected`.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, expected: &ArchitectureSpec) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if &ckpt.params.spec != expected {
        return Err(Error::SpecMismatch(format!(
            "checkpoint holds a {} model, expected {}",
            ckpt.params.spec.variant, expected.variant
        )));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Variant};

    fn sample_ckpt() -> Checkpoint {
        let params = build_model(&ArchitectureSpec::mini(Variant::DualChannelAux, 6, Some(2)), 5).unwrap();
        Checkpoint::new(params)
    }

    #[test]
    fn bytes_round_trip() {
        let mut ckpt = sample_ckpt();
        ckpt.params.running.get_mut("aux.bn1").unwrap().mean[0] = 0.123;
        ckpt.epoch = 7;
        ckpt.vocab_hash = Some(42);
        let mut opt = OptimizerState { step: 3, ..Default::default() };
        opt.first.insert("out.bias".into(), Tensor::full([6], 0.5));
        opt.second.insert("out.bias".into(), Tensor::full([6], 0.25));
        ckpt.optimizer = Some(opt);
        let decoded = decode_checkpoint(&encode_checkpoint(&ckpt).unwrap()).unwrap();
        assert_eq!(decoded, ckpt);
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = encode_checkpoint(&sample_ckpt()).unwrap();
        bytes[0] = b'X';
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(matches!(err, Error::BadFormat(_)));
        assert!(err.to_string().contains("bad format"));
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode_checkpoint(&sample_ckpt()).unwrap();
        let err = decode_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Truncated(_)), "{err}");
        assert!(matches!(decode_checkpoint(&bytes[..8]).unwrap_err(), Error::Truncated(_)));
    }

    #[test]
    fn version_mismatch() {
        let bytes = encode_checkpoint(&sample_ckpt()).unwrap();
        let len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let doc = std::str::from_utf8(&bytes[12..12 + len]).unwrap().replacen("\"version\":1", "\"version\":9", 1);
        let mut patched = bytes[..4].to_vec();
        patched.extend_from_slice(&(doc.len() as u64).to_le_bytes());
        patched.extend_from_slice(doc.as_bytes());
        patched.extend_from_slice(&bytes[12 + len..]);
        assert!(matches!(decode_checkpoint(&patched).unwrap_err(), Error::VersionMismatch { found: 9, .. }));
    }

    #[test]
    fn rng_state_resumes_stream() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let _: u64 = rng.random();
        let state = RngState::capture(&rng);
        let mut resumed = state.restore().unwrap();
        assert_eq!(rng.random::<u64>(), resumed.random::<u64>());
    }
}
