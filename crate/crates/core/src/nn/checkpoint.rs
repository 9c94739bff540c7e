//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic `DIFFSEGC`, `u32` format version, `u64` header length,
//! a UTF-8 JSON header, then every parameter as little-endian `f64` in header
//! order. The header carries the model kind, its config, and parameter shapes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DIFFSEGC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    params: Vec<ParamShape>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamShape {
    name: String,
    shape: Vec<usize>,
}

pub fn encode(kind: &str, meta: &serde_json::Value, params: &ParamStore) -> Result<Vec<u8>> {
    let header = Header {
        kind: kind.to_string(),
        meta: meta.clone(),
        params: params
            .iter()
            .map(|(name, v)| ParamShape {
                name: name.to_string(),
                shape: v.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(20 + header.len() + params.scalar_count() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, v) in params.iter() {
        for x in v.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode(bytes: &[u8], expected_kind: &str) -> Result<(serde_json::Value, ParamStore)> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    read_exact(&mut r, &mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let mut len = [0u8; 8];
    read_exact(&mut r, &mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if r.len() < len {
        return Err(Error::Format("truncated checkpoint header".into()));
    }
    let header: Header = serde_json::from_slice(&r[..len])?;
    r = &r[len..];
    if header.kind != expected_kind {
        return Err(Error::Format(format!(
            "checkpoint holds a `{}`, expected `{expected_kind}`",
            header.kind
        )));
    }
    let mut names = Vec::with_capacity(header.params.len());
    let mut values = Vec::with_capacity(header.params.len());
    for p in header.params {
        let n: usize = p.shape.iter().product();
        if r.len() < n * 8 {
            return Err(Error::Format(format!(
                "truncated data for parameter {}",
                p.name
            )));
        }
        let data: Vec<f64> = r[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        r = &r[n * 8..];
        values.push(
            Tensor::from_shape_vec(IxDyn(&p.shape), data)
                .map_err(|e| Error::Format(format!("parameter {}: {e}", p.name)))?,
        );
        names.push(p.name);
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after checkpoint data".into()));
    }
    Ok((header.meta, ParamStore::from_parts(names, values)))
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("truncated checkpoint".into()))
}

pub fn write(path: &Path, kind: &str, meta: &serde_json::Value, params: &ParamStore) -> Result<()> {
    let bytes = encode(kind, meta, params)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path, kind: &str) -> Result<(serde_json::Value, ParamStore)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, kind)
}
