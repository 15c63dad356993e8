//! Single-file weights: an 8-byte little-endian header length, a JSON header
//! naming every tensor with its offset and shape, then little-endian f64 data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const FORMAT: &str = "attnseg-weights";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    /// In f64 elements from the start of the data section.
    offset: usize,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct BufferEntry {
    name: String,
    offset: usize,
    channels: usize,
    initialized: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    tensors: Vec<Entry>,
    buffers: Vec<BufferEntry>,
}

pub fn to_bytes(store: &ParamStore) -> Result<Vec<u8>> {
    let mut data: Vec<f64> = Vec::with_capacity(store.total_scalars());
    let mut tensors = Vec::new();
    for (_, name, t) in store.params() {
        tensors.push(Entry {
            name: name.to_string(),
            offset: data.len(),
            shape: t.shape().to_vec(),
        });
        data.extend_from_slice(t.data());
    }
    let mut buffers = Vec::new();
    for (name, s) in store.buffers() {
        buffers.push(BufferEntry {
            name: name.to_string(),
            offset: data.len(),
            channels: s.mean.len(),
            initialized: s.initialized,
        });
        data.extend_from_slice(&s.mean);
        data.extend_from_slice(&s.var);
    }
    let header = serde_json::to_vec(&Header {
        format: FORMAT.into(),
        version: VERSION,
        tensors,
        buffers,
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + 8 * data.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Overwrites every tensor and buffer of `store`; names and shapes must match.
pub fn load_bytes(store: &mut ParamStore, bytes: &[u8]) -> Result<()> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 8 {
        return Err(bad("file shorter than its length prefix".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body = bytes
        .get(8..8usize.saturating_add(hlen))
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(bad(format!("unsupported format {} v{}", header.format, header.version)));
    }
    let raw = &bytes[8 + hlen..];
    if raw.len() % 8 != 0 {
        return Err(bad("data section is not a whole number of f64".into()));
    }
    let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let slice = |offset: usize, len: usize, name: &str| {
        data.get(offset..offset + len)
            .ok_or_else(|| bad(format!("{name} runs past the data section")))
    };
    if header.tensors.len() != store.len() {
        return Err(bad(format!("{} tensors in file, model has {}", header.tensors.len(), store.len())));
    }
    for e in &header.tensors {
        let id = store.id(&e.name).ok_or_else(|| bad(format!("unknown tensor {}", e.name)))?;
        if store.get(id).shape() != e.shape.as_slice() {
            return Err(bad(format!(
                "{}: file shape {:?}, model shape {:?}",
                e.name,
                e.shape,
                store.get(id).shape()
            )));
        }
        let len = e.shape.iter().product();
        *store.get_mut(id) = Tensor::from_vec(&e.shape, slice(e.offset, len, &e.name)?.to_vec())?;
    }
    let mut found = 0;
    for (name, stats) in store.buffers_mut() {
        let Some(e) = header.buffers.iter().find(|b| b.name == name) else {
            continue;
        };
        found += 1;
        if e.channels != stats.mean.len() {
            return Err(bad(format!("buffer {name}: {} channels in file", e.channels)));
        }
        let v = slice(e.offset, 2 * e.channels, name)?;
        stats.mean.copy_from_slice(&v[..e.channels]);
        stats.var.copy_from_slice(&v[e.channels..]);
        stats.initialized = e.initialized;
    }
    if found != header.buffers.len() || found != store.buffers().count() {
        return Err(bad("buffer set differs from the model".into()));
    }
    Ok(())
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    let bytes = to_bytes(store)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, store: &mut ParamStore) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_bytes(store, &bytes)
}
