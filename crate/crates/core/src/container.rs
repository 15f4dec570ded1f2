//! Binary container shared by checkpoints and codec files: 4-byte magic,
//! u32 version, u64 header length, JSON header, then little-endian f32
//! payloads in header order.

use gpp_tensor::Tensor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{CoreError, Result};

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Header<M> {
    meta: M,
    tensors: Vec<TensorEntry>,
}

pub(crate) fn encode<M: Serialize>(magic: &[u8; 4], version: u32, meta: &M, tensors: &[(String, &Tensor<f32>)]) -> Vec<u8> {
    let header = Header {
        meta,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec(), dtype: "f32".into() })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let payload: usize = tensors.iter().map(|(_, t)| t.numel() * 4).sum();
    let mut out = Vec::with_capacity(16 + json.len() + payload);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) fn decode<M: DeserializeOwned>(
    magic: &[u8; 4],
    version: u32,
    bytes: &[u8],
    path: &Path,
) -> Result<(M, Vec<(String, Tensor<f32>)>)> {
    let fail = |detail: String| CoreError::Format { path: path.to_path_buf(), detail };
    if bytes.len() < 16 || &bytes[..4] != magic {
        return Err(fail(format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if found != version {
        return Err(fail(format!("unsupported version {found}, expected {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[16..];
    if hlen > body.len() as u64 {
        return Err(fail(format!("header of {hlen} bytes exceeds file")));
    }
    let hlen = hlen as usize;
    let header: Header<M> = serde_json::from_slice(&body[..hlen]).map_err(|e| fail(format!("header: {e}")))?;
    let mut rest = &body[hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        if entry.dtype != "f32" {
            return Err(fail(format!("tensor {} has unsupported dtype {}", entry.name, entry.dtype)));
        }
        let need = entry
            .shape
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| fail(format!("tensor {} has an impossible shape {:?}", entry.name, entry.shape)))?;
        if rest.len() < need {
            return Err(fail(format!(
                "payload of tensor {} truncated: need {need} bytes, {} left",
                entry.name,
                rest.len()
            )));
        }
        let data = rest[..need].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        rest = &rest[need..];
        let t = Tensor::new(entry.shape, data).map_err(|e| fail(format!("tensor {}: {e}", entry.name)))?;
        tensors.push((entry.name, t));
    }
    if !rest.is_empty() {
        return Err(fail(format!("{} trailing bytes after the last tensor", rest.len())));
    }
    Ok((header.meta, tensors))
}

/// Writes through a temporary sibling and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(crate::error::io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(crate::error::io_err(path))
}
