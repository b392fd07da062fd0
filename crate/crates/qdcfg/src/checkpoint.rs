//! Binary checkpoint files.
//!
//! Layout: magic `QDCK`, `u32` version, `u8` kind, `u32` header length, a JSON
//! header, a `u64` value count, then the parameters as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use qdcfg_core::diversity::{EmbedConfig, EmbeddingModel};
use qdcfg_core::hash::Digest;
use qdcfg_core::merge::MergeMode;
use qdcfg_core::seqmodel::{Layout, ModelConfig, ParamVector, PolicyModel};

use crate::error::{io_err, CliError, Result};

pub const MAGIC: &[u8; 4] = b"QDCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Policy = 1,
    Embedding = 2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Policy(ModelConfig),
    Embedding(EmbedConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub spec: ModelSpec,
    pub layout: Layout,
    pub lineage: String,
    pub content_hash: String,
    /// Hash of the experiment configuration that produced the file.
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merge: Option<MergeProvenance>,
}

/// How a merged checkpoint was built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeProvenance {
    pub mode: MergeMode,
    pub inputs: Vec<MergeInput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeInput {
    pub content_hash: String,
    pub weight: f64,
    /// Path of the input as given.
    pub source: String,
}

fn encode(kind: Kind, header: &Header, values: &[f64]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(21 + json.len() + 8 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind as u8);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Option<&'a [u8]> {
    if buf.len() < n {
        return None;
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Some(head)
}

fn decode(path: &Path, bytes: &[u8]) -> Result<(Kind, Header, Vec<f64>)> {
    let bad = |m: &str| CliError::format(path, m);
    let mut b = bytes;
    if take(&mut b, 4) != Some(MAGIC.as_slice()) {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(take(&mut b, 4).ok_or_else(|| bad("truncated"))?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let kind = match take(&mut b, 1).ok_or_else(|| bad("truncated"))?[0] {
        1 => Kind::Policy,
        2 => Kind::Embedding,
        k => return Err(bad(&format!("unknown checkpoint kind {k}"))),
    };
    let hlen = u32::from_le_bytes(take(&mut b, 4).ok_or_else(|| bad("truncated"))?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(&mut b, hlen).ok_or_else(|| bad("truncated header"))?)
        .map_err(|e| bad(&format!("bad header: {e}")))?;
    let n = u64::from_le_bytes(take(&mut b, 8).ok_or_else(|| bad("truncated"))?.try_into().unwrap()) as usize;
    if b.len() != 8 * n {
        return Err(bad("parameter block length does not match its count"));
    }
    let values = b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((kind, header, values))
}

fn params_from(path: &Path, header: &Header, values: Vec<f64>) -> Result<ParamVector> {
    let lineage = Digest::from_hex(&header.lineage).ok_or_else(|| CliError::format(path, "bad lineage hash"))?;
    let params = ParamVector::new(values, header.layout.clone(), lineage)?;
    if params.content_hash().to_string() != header.content_hash {
        return Err(CliError::format(path, "content hash mismatch (file corrupted)"));
    }
    Ok(params)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn header(spec: ModelSpec, params: &ParamVector, config_hash: &str) -> Header {
    Header {
        spec,
        layout: params.layout().clone(),
        lineage: params.lineage().to_string(),
        content_hash: params.content_hash().to_string(),
        config_hash: config_hash.into(),
        merge: None,
    }
}

pub fn encode_policy(model: &PolicyModel, config_hash: &str, merge: Option<MergeProvenance>) -> Vec<u8> {
    let mut h = header(ModelSpec::Policy(model.config().clone()), &model.params, config_hash);
    h.merge = merge;
    encode(Kind::Policy, &h, &model.params.values)
}

pub fn save_policy(path: &Path, model: &PolicyModel, config_hash: &str) -> Result<()> {
    write_bytes(path, &encode_policy(model, config_hash, None))
}

pub fn save_merged(path: &Path, model: &PolicyModel, config_hash: &str, merge: MergeProvenance) -> Result<()> {
    write_bytes(path, &encode_policy(model, config_hash, Some(merge)))
}

pub fn save_embedding(path: &Path, model: &EmbeddingModel, config_hash: &str) -> Result<()> {
    let h = header(ModelSpec::Embedding(model.config().clone()), &model.params, config_hash);
    write_bytes(path, &encode(Kind::Embedding, &h, &model.params.values))
}

fn read(path: &Path) -> Result<(Kind, Header, Vec<f64>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(path, &bytes)
}

pub fn load_policy(path: &Path) -> Result<(PolicyModel, Header)> {
    let (kind, header, values) = read(path)?;
    let ModelSpec::Policy(config) = header.spec.clone() else {
        return Err(CliError::format(path, "expected a policy checkpoint"));
    };
    if kind != Kind::Policy {
        return Err(CliError::format(path, "expected a policy checkpoint"));
    }
    let params = params_from(path, &header, values)?;
    Ok((PolicyModel::from_params(&config, params)?, header))
}

pub fn load_embedding(path: &Path) -> Result<(EmbeddingModel, Header)> {
    let (kind, header, values) = read(path)?;
    let ModelSpec::Embedding(config) = header.spec.clone() else {
        return Err(CliError::format(path, "expected an embedding checkpoint"));
    };
    if kind != Kind::Embedding {
        return Err(CliError::format(path, "expected an embedding checkpoint"));
    }
    let params = params_from(path, &header, values)?;
    Ok((EmbeddingModel::from_params(&config, params)?, header))
}
