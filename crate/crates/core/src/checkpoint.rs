//! Binary training checkpoints.
//!
//! Layout: `b"RGCK"`, `u32` version, `u64` header length, a JSON header, every parameter
//! and Adam moment as little-endian `f32` in header order, then a SHA-256 of all preceding bytes.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::train::{EpochRecord, ModeConfig, ModeNetworks, NetRole, NetSpecs, OptimizerConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"RGCK";
pub const VERSION: u32 = 1;
const PREFIX_LEN: usize = 4 + 4 + 8;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    dims: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct NetHeader {
    role: NetRole,
    adam_step: u64,
    tensors: Vec<TensorHeader>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    mode: ModeConfig,
    specs: NetSpecs,
    optimizer: OptimizerConfig,
    step: u64,
    epoch: u32,
    rng: ChaCha8Rng,
    curves: Vec<EpochRecord>,
    nets: Vec<NetHeader>,
}

pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let entries = state.nets.entries();
    let header = Header {
        mode: state.mode,
        specs: state.specs,
        optimizer: state.optimizer,
        step: state.step,
        epoch: state.epoch,
        rng: state.rng.clone(),
        curves: state.curves.clone(),
        nets: entries
            .iter()
            .map(|(role, p, adam)| NetHeader {
                role: *role,
                adam_step: adam.step,
                tensors: p
                    .names()
                    .iter()
                    .zip(p.tensors())
                    .map(|(n, t)| TensorHeader { name: n.clone(), dims: t.dims().to_vec() })
                    .collect(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + 12 * state.nets.parameter_count() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p, adam) in &entries {
        for t in p.tensors().iter().chain(&adam.m).chain(&adam.v) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<TrainState> {
    let corrupt = |reason: &str| Error::Corrupt { path: path.to_path_buf(), reason: reason.to_string() };
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(corrupt("not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: VERSION });
    }
    if bytes.len() < PREFIX_LEN + DIGEST_LEN {
        return Err(corrupt("truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch (truncated or modified)"));
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let json = body.get(PREFIX_LEN..PREFIX_LEN.saturating_add(header_len)).ok_or_else(|| corrupt("header overruns file"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| corrupt(&format!("header: {e}")))?;

    let mut nets = ModeNetworks::build(header.mode.kind, &header.specs, header.optimizer.adam(), 0)?;
    let mut data = body[PREFIX_LEN + header_len..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut entries = nets.entries_mut();
    if entries.len() != header.nets.len() {
        return Err(corrupt("network list does not match the mode"));
    }
    for ((role, params, adam), nh) in entries.iter_mut().zip(&header.nets) {
        let layout_ok = *role == nh.role
            && params.len() == nh.tensors.len()
            && params.names().iter().zip(params.tensors()).zip(&nh.tensors).all(|((n, t), th)| *n == th.name && t.dims() == th.dims);
        if !layout_ok {
            return Err(corrupt(&format!("layout of network {} does not match its spec", nh.role.as_str())));
        }
        let mut fill = |t: &mut Tensor<f32>| -> Result<()> {
            for v in t.data_mut() {
                *v = data.next().ok_or_else(|| corrupt("payload too short"))?;
            }
            Ok(())
        };
        for t in params.tensors_mut() {
            fill(t)?;
        }
        for t in adam.m.iter_mut().chain(adam.v.iter_mut()) {
            fill(t)?;
        }
        adam.step = nh.adam_step;
    }
    drop(entries);
    if data.next().is_some() {
        return Err(corrupt("trailing payload"));
    }
    Ok(TrainState {
        mode: header.mode,
        specs: header.specs,
        optimizer: header.optimizer,
        nets,
        step: header.step,
        epoch: header.epoch,
        rng: header.rng,
        curves: header.curves,
    })
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode(state)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
