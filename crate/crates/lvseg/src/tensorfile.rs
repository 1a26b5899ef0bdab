//! Flat tensor container shared by checkpoints, probability maps and flow
//! fields: a little-endian `u64` header length, a JSON header, then every
//! tensor as contiguous little-endian `f64` values.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    pub offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header<M> {
    meta: M,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), data }
    }
}

pub fn encode<M: Serialize>(meta: &M, tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for t in tensors {
        ensure!(t.shape.iter().product::<usize>() == t.data.len(), "tensor {} has shape {:?} but {} values", t.name, t.shape, t.data.len());
        entries.push(TensorEntry { name: t.name.clone(), shape: t.shape.clone(), offset });
        offset += 8 * t.data.len();
    }
    let header = serde_json::to_vec(&Header { meta, tensors: entries })?;
    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode<M: DeserializeOwned>(bytes: &[u8]) -> Result<(M, Vec<NamedTensor>)> {
    ensure!(bytes.len() >= 8, "file shorter than its length prefix");
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    ensure!(bytes.len() >= 8 + hlen, "header length {} exceeds file size", hlen);
    let header: Header<M> = serde_json::from_slice(&bytes[8..8 + hlen]).context("tensor header")?;
    let data = &bytes[8 + hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + 8 * n;
        if end > data.len() {
            bail!("tensor {} runs past the end of the data ({} > {})", e.name, end, data.len());
        }
        let values = data[e.offset..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(NamedTensor { name: e.name, shape: e.shape, data: values });
    }
    Ok((header.meta, tensors))
}

pub fn write<M: Serialize>(path: &Path, meta: &M, tensors: &[NamedTensor]) -> Result<()> {
    fs::write(path, encode(meta, tensors)?).with_context(|| format!("writing {}", path.display()))
}

pub fn read<M: DeserializeOwned>(path: &Path) -> Result<(M, Vec<NamedTensor>)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode(&bytes).with_context(|| format!("decoding {}", path.display()))
}
