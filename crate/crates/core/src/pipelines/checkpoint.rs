//! Checkpoint file:
//! `"UMMC" | u32 version | u64 header_len | header JSON | u32 tensor_count | tensor blobs`.
//!
//! Blobs are named `param.<name>`, `optim.m.<name>` and `optim.v.<name>`.
//! Every draw of a run derives from the master seed and a counter, so the
//! PRNG state is fully described by the seed and the update count.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{build_model, ModelConfig};
use super::optim::AdamW;
use super::train::{TrainConfig, Trainer};
use crate::numerics::{read_blob, write_blob, Tensor};
use crate::rng::{derive_seed, Stream};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UMMC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub master_seed: u64,
    /// Samples drawn so far; the next sample uses this counter.
    pub counter: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub corpus_len: usize,
    pub rng: RngState,
}

fn section<'a>(input: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if input.len() < n {
        return Err(Error::Checkpoint(format!("truncated file: missing {what}")));
    }
    let (head, rest) = input.split_at(n);
    *input = rest;
    Ok(head)
}

pub fn encode_checkpoint(t: &Trainer) -> Result<Vec<u8>> {
    let spe = t.steps_per_epoch();
    let header = CheckpointHeader {
        model: t.model.config.clone(),
        train: t.train.clone(),
        step: t.step,
        corpus_len: t.corpus_len(),
        rng: RngState {
            master_seed: t.train.seed,
            counter: (t.step / spe) * t.corpus_len() as u64 + ((t.step % spe) as usize * t.train.global_batch()).min(t.corpus_len()) as u64,
        },
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&((3 * t.store.len()) as u32).to_le_bytes());
    for p in t.store.iter() {
        write_blob(&mut out, &format!("param.{}", p.name), &p.tensor);
    }
    for (p, m) in t.store.iter().zip(&t.opt.m) {
        write_blob(&mut out, &format!("optim.m.{}", p.name), m);
    }
    for (p, v) in t.store.iter().zip(&t.opt.v) {
        write_blob(&mut out, &format!("optim.v.{}", p.name), v);
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Trainer> {
    let mut input = bytes;
    if section(&mut input, 4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic (not a checkpoint file)".into()));
    }
    let version = u32::from_le_bytes(section(&mut input, 4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: file has {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let len = u64::from_le_bytes(section(&mut input, 8, "header length")?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Checkpoint("header length overflows".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(section(&mut input, len, "header")?)
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    let count = u32::from_le_bytes(section(&mut input, 4, "tensor count")?.try_into().expect("4 bytes")) as usize;
    let mut tensors: HashMap<String, Tensor<f64>> = HashMap::with_capacity(count);
    for i in 0..count {
        let (name, t) = read_blob::<f64>(&mut input).map_err(|e| Error::Checkpoint(format!("tensor section, entry {i}: {e}")))?;
        tensors.insert(name, t);
    }
    if !input.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after the tensor section", input.len())));
    }

    let (model, mut store) = build_model(&header.model, derive_seed(header.train.seed, Stream::Init, 0))?;
    let mut opt = AdamW::new(header.train.optimizer, &store);
    let mut take = |key: String, shape: &[usize]| -> Result<Tensor<f64>> {
        let t = tensors
            .remove(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key:?}")))?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!("tensor {key:?} has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = take(format!("param.{name}"), &shape)?;
        opt.m[id.index()] = take(format!("optim.m.{name}"), &shape)?;
        opt.v[id.index()] = take(format!("optim.v.{name}"), &shape)?;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra:?}")));
    }
    opt.t = header.step;
    Trainer::from_parts(model, store, opt, header.train, header.step, header.corpus_len)
}

pub fn save_checkpoint(t: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(t)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Trainer> {
    let path = path.as_ref();
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Header only, without materializing the model.
pub fn read_checkpoint_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    let mut input = bytes;
    if section(&mut input, 4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic (not a checkpoint file)".into()));
    }
    section(&mut input, 4, "version")?;
    let len = u64::from_le_bytes(section(&mut input, 8, "header length")?.try_into().expect("8 bytes")) as usize;
    serde_json::from_slice(section(&mut input, len, "header")?).map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))
}
