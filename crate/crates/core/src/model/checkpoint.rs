//! Single-file checkpoint archive.
//!
//! Layout: the 8-byte magic `CROWDCKP`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a UTF-8 JSON header with
//! the network config and tensor table, then every tensor's values as
//! little-endian `f64` in table order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::NetworkConfig;
use crate::model::network::Model;
use crate::model::params::{Param, Params};

pub const MAGIC: &[u8; 8] = b"CROWDCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: NetworkConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn encode(model: &Model, meta: serde_json::Value) -> Vec<u8> {
    let header = Header {
        format: "crowdcount-checkpoint".into(),
        version: FORMAT_VERSION,
        config: model.config.clone(),
        tensors: model
            .params
            .tensors()
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 8 * model.params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in model.params.iter_scalars() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(Model, serde_json::Value)> {
    let bad = |m: &str| Error::format(path, m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a crowdcount checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let mut data = &bytes[20 + hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        if data.len() < 8 * n {
            return Err(bad(&format!("tensor {} is truncated", entry.name)));
        }
        let values = data[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        data = &data[8 * n..];
        tensors.push(Param {
            name: entry.name,
            shape: entry.shape,
            data: values,
        });
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after tensor data"));
    }
    let model = Model::from_parts(header.config, Params::from_tensors(tensors))
        .map_err(|e| bad(&e.to_string()))?;
    Ok((model, header.meta))
}

pub fn save(path: &Path, model: &Model, meta: serde_json::Value) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, encode(model, meta)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
