//! Parameter checkpoints.
//!
//! A checkpoint is a single flat file:
//!
//! ```text
//! magic    8 bytes   "CETCCKPT"
//! version  u32 LE    1
//! length   u64 LE    byte length of the manifest
//! manifest JSON      {"version":1,"tensors":[{"name","shape","offset","numel"}...],"metadata":{...}}
//! payload  f32 LE    every tensor back to back, in manifest order
//! ```
//!
//! `offset` and `numel` count `f32` elements from the start of the payload.
//! Values are stored as `f32`; anything already on the `f32` grid
//! round-trips bit for bit.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CETCCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub numel: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

/// Parameters plus free-form metadata read back from a checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

pub fn encode(params: &ParamStore, metadata: &serde_json::Map<String, serde_json::Value>) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            numel: t.numel(),
        });
        offset += t.numel();
    }
    let manifest = serde_json::to_vec(&Manifest {
        version: VERSION,
        tensors,
        metadata: metadata.clone(),
    })?;
    let mut out = Vec::with_capacity(20 + manifest.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, t) in params.iter() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |msg: String| Error::Checkpoint(msg);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing CETCCKPT header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let manifest_end = 20usize
        .checked_add(mlen)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[20..manifest_end])?;
    let payload = &bytes[manifest_end..];
    let mut params = ParamStore::new();
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        if numel != entry.numel {
            return Err(bad(format!("`{}`: shape {:?} disagrees with numel {}", entry.name, entry.shape, entry.numel)));
        }
        let start = entry.offset * 4;
        let end = start + numel * 4;
        if end > payload.len() {
            return Err(bad(format!("`{}`: payload truncated", entry.name)));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        params.insert(entry.name.clone(), Tensor::new(&entry.shape, data)?)?;
    }
    Ok(Checkpoint {
        params,
        metadata: manifest.metadata,
    })
}

pub fn save(
    path: impl AsRef<Path>,
    params: &ParamStore,
    metadata: &serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let bytes = encode(params, metadata)?;
    let mut f = fs::File::create(path.as_ref())?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
