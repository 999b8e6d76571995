//! Binary checkpoints: magic, version, JSON header, little-endian parameter
//! values and momenta, SHA-256 trailer.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::history::RunHistory;
use crate::bbn::BbnModel;
use crate::error::{Error, Result};
use crate::param::{ParamStore, Role};

const MAGIC: &[u8; 8] = b"LTDARTS\x01";
const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    role: Role,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config_hash: String,
    config: String,
    epoch: usize,
    params: Vec<ParamEntry>,
    history: RunHistory,
}

/// What a checkpoint restores besides parameter values.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub history: RunHistory,
}

pub fn encode_checkpoint(
    cfg: &TrainConfig,
    store: &ParamStore,
    epoch: usize,
    history: &RunHistory,
) -> Result<Vec<u8>> {
    let header = Header {
        config_hash: cfg.hash(),
        config: cfg.to_text(),
        epoch,
        params: store
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name().to_string(),
                role: p.role(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        history: history.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in store.iter() {
        for v in p.value.data().iter().chain(&p.momentum) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn decode_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN {
        return Err(corrupt("file too short"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    if &body[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let json = body
        .get(20..20 + len)
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| corrupt(format!("header: {e}")))?;
    Ok((header, &body[20 + len..]))
}

/// Restore parameters and momenta into `store` after checking that layout
/// and configuration match. Nothing is written unless every check passes.
pub fn decode_checkpoint(
    bytes: &[u8],
    cfg: &TrainConfig,
    store: &mut ParamStore,
) -> Result<(usize, RunHistory)> {
    let (header, payload) = decode_header(bytes)?;
    if header.config_hash != cfg.hash() {
        return Err(corrupt(format!(
            "config hash mismatch: checkpoint {}, current {}",
            header.config_hash,
            cfg.hash()
        )));
    }
    if header.params.len() != store.len() {
        return Err(corrupt(format!(
            "{} parameters in file, model has {}",
            header.params.len(),
            store.len()
        )));
    }
    for (entry, (_, p)) in header.params.iter().zip(store.iter()) {
        if entry.name != p.name() || entry.role != p.role() || entry.shape != p.value.shape() {
            return Err(corrupt(format!(
                "parameter mismatch: file {} {:?} {}, model {} {:?} {}",
                entry.name,
                entry.shape,
                entry.role,
                p.name(),
                p.value.shape(),
                p.role()
            )));
        }
    }
    let expected: usize = store.iter().map(|(_, p)| 16 * p.value.len()).sum();
    if payload.len() != expected {
        return Err(corrupt(format!(
            "payload has {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let mut floats = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for p in store.iter_mut() {
        let n = p.value.len();
        for v in p.value.data_mut() {
            *v = floats.next().expect("length checked");
        }
        p.momentum = floats.by_ref().take(n).collect();
        p.grad = None;
    }
    Ok((header.epoch, header.history))
}

/// Write via a temporary sibling and rename, so a crash never leaves a torn file.
pub fn save_checkpoint(
    path: &Path,
    cfg: &TrainConfig,
    store: &ParamStore,
    epoch: usize,
    history: &RunHistory,
) -> Result<()> {
    let bytes = encode_checkpoint(cfg, store, epoch, history)?;
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(
    path: &Path,
    cfg: &TrainConfig,
    model: &mut BbnModel,
) -> Result<(usize, RunHistory)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, cfg, &mut model.store)
}

/// Rebuild the model a checkpoint was taken from, using its embedded config.
pub fn open_checkpoint(path: &Path) -> Result<(Checkpoint, BbnModel)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, _) = decode_header(&bytes)?;
    let config = TrainConfig::from_text(&header.config)?;
    let mut model = super::trainer::init_model(&config)?;
    let (epoch, history) = decode_checkpoint(&bytes, &config, &mut model.store)?;
    Ok((
        Checkpoint {
            config,
            epoch,
            history,
        },
        model,
    ))
}
