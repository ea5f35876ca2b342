//! Binary checkpoint container.
//!
//! Layout: 8-byte magic `RDITCKP1`, little-endian `u32` header length, UTF-8
//! JSON header, raw little-endian `f64` parameter data in header order, and a
//! 32-byte SHA-256 digest of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DiT, DiTConfig, JointDesign};
use crate::error::{Error, Result};
use crate::io;
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"RDITCKP1";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    /// Index of the first value in the data section.
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: DiTConfig,
    design: Option<JointDesign>,
    params: Vec<ParamEntry>,
}

pub fn to_bytes(model: &DiT) -> Result<Vec<u8>> {
    let mut params = Vec::with_capacity(model.params().len());
    let mut offset = 0;
    for (_, p) in model.params().iter() {
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            trainable: p.trainable,
            offset,
        });
        offset += p.tensor.numel();
    }
    let header =
        Header { format_version: FORMAT_VERSION, config: model.config().clone(), design: model.design(), params };
    let header = serde_json::to_vec(&header)?;
    let header_len =
        u32::try_from(header.len()).map_err(|_| Error::Config("checkpoint header exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(12 + header.len() + offset * 8 + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for (_, p) in model.params().iter() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<DiT> {
    let bad = |reason: &str| Error::format(origin, reason);
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("content hash mismatch"));
    }
    let header_len = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize;
    let header_end =
        12usize.checked_add(header_len).filter(|&e| e <= body.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&body[12..header_end]).map_err(|e| Error::format(origin, format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad("unsupported format version"));
    }
    let data = &body[header_end..];
    if data.len() % 8 != 0 {
        return Err(bad("data section is not a whole number of f64 values"));
    }
    let values: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();

    let mut model = DiT::new_base(header.config, 0)?;
    if let Some(design) = header.design {
        model = model.extend(design, 0)?;
    }
    let mut loaded = Vec::with_capacity(header.params.len());
    for entry in header.params {
        let n: usize = entry.shape.iter().product();
        let slice = entry
            .offset
            .checked_add(n)
            .and_then(|end| values.get(entry.offset..end))
            .ok_or_else(|| Error::format(origin, format!("parameter `{}` out of bounds", entry.name)))?;
        loaded.push((entry.name, Tensor::new(entry.shape, slice.to_vec())?, entry.trainable));
    }
    model.load_values(loaded)?;
    Ok(model)
}

/// Writes the checkpoint atomically and returns its content hash.
pub fn save(model: &DiT, path: &Path) -> Result<String> {
    let bytes = to_bytes(model)?;
    io::write_atomic(path, &bytes)?;
    Ok(io::sha256_hex(&bytes))
}

pub fn load(path: &Path) -> Result<DiT> {
    from_bytes(&io::read(path)?, path)
}

/// SHA-256 over names, shapes and values of every base (non-extension)
/// parameter.
pub fn base_hash(model: &DiT) -> String {
    let mut h = Sha256::new();
    for (_, p) in model.params().iter().filter(|(_, p)| DiT::is_base_param(&p.name)) {
        h.update(p.name.as_bytes());
        h.update([0]);
        for s in p.tensor.shape() {
            h.update((*s as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
