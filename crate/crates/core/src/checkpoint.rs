//! Versioned binary checkpoints of model parameters and optimizer state.
//!
//! Layout (little-endian):
//!
//! ```text
//! "DSINCKPT"  u32 version  u32 stage  [32] config hash
//! u64 config length, config JSON
//! u32 block count, then per block: u32 name length, name, tensor
//! [32] SHA-256 of everything above
//! ```
//!
//! The checksum is verified before anything is decoded, so a damaged file
//! never yields a partially restored model.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{BatchNormState, Tensor};
use crate::train::{AdamConfig, AdamState};

const MAGIC: &[u8; 8] = b"DSINCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Hex SHA-256 of the model configuration.
pub fn config_hash(config: &ModelConfig) -> String {
    hex(&Sha256::digest(config.to_json().as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Last completed training stage; 0 for a freshly initialized model.
    pub stage: u8,
    pub model: ModelParams,
    pub optimizer: Option<AdamState>,
}

fn blocks(model: &ModelParams, optimizer: Option<&AdamState>) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (format!("param/{n}"), t.clone()))
        .collect();
    for (name, bn) in model.named_bn_states() {
        out.push((format!("{name}/mean"), Tensor::from_vec(bn.running_mean().to_vec())));
        out.push((format!("{name}/var"), Tensor::from_vec(bn.running_var().to_vec())));
        out.push((format!("{name}/ready"), Tensor::scalar(bn.is_initialized() as u8 as f64)));
    }
    if let Some(opt) = optimizer {
        let c = opt.config;
        out.push(("adam/config".into(), Tensor::from_vec(vec![c.lr, c.beta1, c.beta2, c.eps])));
        out.push(("adam/step".into(), Tensor::scalar(opt.step as f64)));
        for ((name, _), (m, v)) in model.named_params().iter().zip(opt.first.iter().zip(&opt.second)) {
            out.push((format!("adam/m/{name}"), m.clone()));
            out.push((format!("adam/v/{name}"), v.clone()));
        }
    }
    out
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(model: &ModelParams, optimizer: Option<&AdamState>, stage: u8) -> Vec<u8> {
    let config = model.config.to_json();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(stage as u32).to_le_bytes());
    buf.extend_from_slice(&Sha256::digest(config.as_bytes()));
    buf.extend_from_slice(&(config.len() as u64).to_le_bytes());
    buf.extend_from_slice(config.as_bytes());
    let blocks = blocks(model, optimizer);
    buf.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, t) in &blocks {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        t.write_to(&mut buf).expect("in-memory write");
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

/// Writes through a temporary file and renames, so readers never see a partial file.
pub fn save_checkpoint(path: &Path, model: &ModelParams, optimizer: Option<&AdamState>, stage: u8) -> Result<()> {
    let bytes = encode_checkpoint(model, optimizer, stage);
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

fn take<'a>(r: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(corrupt(format!("truncated while reading {what}")));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_u32(r: &mut &[u8], what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r, 4, what)?.try_into().expect("4 bytes")))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch: file is truncated or corrupted"));
    }
    let mut r = &body[MAGIC.len()..];
    let version = read_u32(&mut r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!(
            "unsupported checkpoint version {version} (supported: {CHECKPOINT_VERSION})"
        )));
    }
    let stage = read_u32(&mut r, "stage")?;
    let stage = u8::try_from(stage).map_err(|_| corrupt(format!("bad stage {stage}")))?;
    let hash = take(&mut r, DIGEST_LEN, "config hash")?.to_vec();
    let len = u64::from_le_bytes(take(&mut r, 8, "config length")?.try_into().expect("8 bytes"));
    let json = take(&mut r, usize::try_from(len).map_err(|_| corrupt("config too large"))?, "config")?;
    if Sha256::digest(json).as_slice() != hash.as_slice() {
        return Err(corrupt("config hash does not match the stored config"));
    }
    let json = std::str::from_utf8(json).map_err(|_| corrupt("config is not UTF-8"))?;
    let config = ModelConfig::from_json(json)?;
    let count = read_u32(&mut r, "block count")?;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let n = read_u32(&mut r, "block name length")? as usize;
        let name = String::from_utf8(take(&mut r, n, "block name")?.to_vec())
            .map_err(|_| corrupt("block name is not UTF-8"))?;
        let t = Tensor::read_from(&mut r).map_err(|e| corrupt(format!("block {name}: {e}")))?;
        map.insert(name, t);
    }
    if !r.is_empty() {
        return Err(corrupt(format!("{} unexpected bytes after the last block", r.len())));
    }
    restore(stage, config, map)
}

fn grab(map: &mut BTreeMap<String, Tensor>, key: String, shape: &[usize]) -> Result<Tensor> {
    let t = map.remove(&key).ok_or_else(|| corrupt(format!("missing block {key}")))?;
    if t.shape() != shape {
        return Err(corrupt(format!("block {key} has shape {:?}, expected {shape:?}", t.shape())));
    }
    Ok(t)
}

fn restore(stage: u8, config: ModelConfig, mut map: BTreeMap<String, Tensor>) -> Result<Checkpoint> {
    let mut model = ModelParams::init(config, 0)?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(model.params_mut()) {
        let trainable = t.requires_grad();
        *t = grab(&mut map, format!("param/{name}"), t.shape())?.with_requires_grad(trainable);
    }
    let bn_names: Vec<(String, usize)> = model
        .named_bn_states()
        .into_iter()
        .map(|(n, s)| (n, s.channels()))
        .collect();
    for ((name, c), state) in bn_names.iter().zip(model.bn_states_mut()) {
        let mean = grab(&mut map, format!("{name}/mean"), &[*c])?.into_values();
        let var = grab(&mut map, format!("{name}/var"), &[*c])?.into_values();
        let ready = grab(&mut map, format!("{name}/ready"), &[])?.values()[0] != 0.0;
        *state = BatchNormState::from_parts(mean, var, ready).map_err(|e| corrupt(format!("{name}: {e}")))?;
    }
    let optimizer = match map.remove("adam/config") {
        None => None,
        Some(c) => {
            let c = c.values();
            if c.len() != 4 {
                return Err(corrupt("adam/config must hold 4 values"));
            }
            let config = AdamConfig {
                lr: c[0],
                beta1: c[1],
                beta2: c[2],
                eps: c[3],
            };
            let step = grab(&mut map, "adam/step".into(), &[])?.values()[0] as u64;
            let shapes: Vec<Vec<usize>> = model.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect();
            let mut first = Vec::with_capacity(names.len());
            let mut second = Vec::with_capacity(names.len());
            for (name, shape) in names.iter().zip(&shapes) {
                first.push(grab(&mut map, format!("adam/m/{name}"), shape)?);
                second.push(grab(&mut map, format!("adam/v/{name}"), shape)?);
            }
            Some(AdamState {
                config,
                step,
                first,
                second,
            })
        }
    };
    if let Some(extra) = map.keys().next() {
        return Err(corrupt(format!("unexpected block {extra}")));
    }
    Ok(Checkpoint {
        stage,
        model,
        optimizer,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(d) => Error::Checkpoint(format!("{}: {d}", path.display())),
        other => other,
    })
}

/// Loads and checks that the stored model has the expected shape.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let found = &ckpt.model.config;
    if found.num_labels != expected.num_labels {
        return Err(Error::Checkpoint(format!(
            "{}: expected N={} labels, found N={}",
            path.display(),
            expected.num_labels,
            found.num_labels
        )));
    }
    if found != expected {
        return Err(Error::Checkpoint(format!(
            "{}: model config hash {} does not match expected {}",
            path.display(),
            config_hash(found),
            config_hash(expected)
        )));
    }
    Ok(ckpt)
}
