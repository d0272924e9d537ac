//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u32` version, `u32` header length,
//! a JSON header, then every array as little-endian `f32` in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::inject_lora;
use crate::model::{build_model, ModelConfig, ModelState};

use super::optim::{AdamW, AdamWConfig, Moments};
use super::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ROSAMCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

const MOMENT_M: &str = "opt.m/";
const MOMENT_V: &str = "opt.v/";

/// Model weights, optimiser moments and loop position. Augmentation streams
/// are keyed by `(seed, epoch, index)`, so `train_config.seed` and `epoch`
/// fully determine the random state of a resumed run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub optimizer: AdamW,
    pub train_config: Option<TrainConfig>,
    pub step: u64,
    pub epoch: usize,
}

impl Checkpoint {
    /// A checkpoint holding only weights.
    pub fn from_state(state: ModelState) -> Self {
        Checkpoint {
            state,
            optimizer: AdamW::new(AdamWConfig::default()),
            train_config: None,
            step: 0,
            epoch: 0,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
    optimizer: AdamWConfig,
    optimizer_steps: BTreeMap<String, u64>,
    step: u64,
    epoch: usize,
    payload_crc32: u32,
    arrays: Vec<ArrayEntry>,
}

fn push_f32(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut arrays = Vec::new();
    let mut payload = Vec::new();
    for (name, p) in &ckpt.state.params {
        arrays.push(ArrayEntry {
            name: name.clone(),
            shape: p.shape.clone(),
        });
        push_f32(&mut payload, &p.data);
    }
    let mut optimizer_steps = BTreeMap::new();
    for (name, m) in &ckpt.optimizer.moments {
        let shape = ckpt.state.params.get(name).map(|p| p.shape.clone()).unwrap_or_else(|| vec![m.m.len()]);
        for (prefix, values) in [(MOMENT_M, &m.m), (MOMENT_V, &m.v)] {
            arrays.push(ArrayEntry {
                name: format!("{prefix}{name}"),
                shape: shape.clone(),
            });
            push_f32(&mut payload, values);
        }
        optimizer_steps.insert(name.clone(), m.steps);
    }
    let header = Header {
        model: ckpt.state.config.clone(),
        train: ckpt.train_config.clone(),
        optimizer: ckpt.optimizer.config,
        optimizer_steps,
        step: ckpt.step,
        epoch: ckpt.epoch,
        payload_crc32: crc32fast::hash(&payload),
        arrays,
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corrupt(msg.into())
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| corrupt("truncated checkpoint preamble"))
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(bytes, 8)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = read_u32(bytes, 12)? as usize;
    let json = bytes.get(16..16 + hlen).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| corrupt(format!("bad header: {e}")))?;
    let payload = &bytes[16 + hlen..];
    let expected_len: usize = header.arrays.iter().map(|a| a.shape.iter().product::<usize>() * 4).sum();
    if payload.len() != expected_len {
        return Err(corrupt(format!(
            "payload is {} bytes, header describes {expected_len}",
            payload.len()
        )));
    }
    if crc32fast::hash(payload) != header.payload_crc32 {
        return Err(corrupt("payload checksum mismatch"));
    }

    let mut arrays: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    let mut offset = 0;
    for a in &header.arrays {
        let n: usize = a.shape.iter().product();
        let data = payload[offset..offset + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        offset += n * 4;
        if arrays.insert(a.name.clone(), (a.shape.clone(), data)).is_some() {
            return Err(corrupt(format!("duplicate array `{}`", a.name)));
        }
    }

    // Rebuild the architecture from the config and check every shape.
    let mut state = build_model(&header.model).map_err(|e| corrupt(format!("invalid model config: {e}")))?;
    if arrays.keys().any(|n| n.contains(".lora.") && !n.starts_with("opt.")) {
        inject_lora(&mut state, header.model.lora_rank).map_err(|e| corrupt(format!("adapter rank: {e}")))?;
    }
    for (name, param) in state.params.iter_mut() {
        let (shape, data) = arrays
            .remove(name)
            .ok_or_else(|| corrupt(format!("missing array `{name}`")))?;
        if shape != param.shape {
            return Err(corrupt(format!(
                "array `{name}` has shape {shape:?}, config implies {:?}",
                param.shape
            )));
        }
        param.data = data;
    }
    let mut optimizer = AdamW::new(header.optimizer);
    for (name, steps) in header.optimizer_steps {
        let numel = state
            .params
            .get(&name)
            .map(|p| p.numel())
            .ok_or_else(|| corrupt(format!("moments for unknown parameter `{name}`")))?;
        let m = arrays.remove(&format!("{MOMENT_M}{name}"));
        let v = arrays.remove(&format!("{MOMENT_V}{name}"));
        let (Some((_, m)), Some((_, v))) = (m, v) else {
            return Err(corrupt(format!("incomplete moments for `{name}`")));
        };
        if m.len() != numel || v.len() != numel {
            return Err(corrupt(format!("moment size mismatch for `{name}`")));
        }
        optimizer.moments.insert(name, Moments { m, v, steps });
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(corrupt(format!("unexpected array `{extra}`")));
    }
    Ok(Checkpoint {
        state,
        optimizer,
        train_config: header.train,
        step: header.step,
        epoch: header.epoch,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
