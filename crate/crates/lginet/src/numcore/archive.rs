//! Parameter checkpoint archive.
//!
//! Layout: one JSON header line mapping each parameter name to
//! `{shape, dtype, byte_offset}`, terminated by a newline, followed by the
//! raw little-endian IEEE-754 payloads concatenated in header order.
//! `byte_offset` is relative to the start of the payload section.
//! Round-trips are bit-exact.

use super::{ParamStore, Precision, Tensor};
use crate::error::{Error, Result};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    shape: Vec<usize>,
    dtype: String,
    byte_offset: u64,
}

pub fn save(path: &Path, store: &ParamStore, precision: Precision) -> Result<()> {
    let elem_size = match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let mut header: IndexMap<String, HeaderEntry> = IndexMap::new();
    let mut offset = 0u64;
    let mut payload: Vec<u8> = Vec::new();
    for (name, t) in store.iter() {
        header.insert(
            name.to_string(),
            HeaderEntry {
                shape: t.shape().to_vec(),
                dtype: precision.dtype_name().to_string(),
                byte_offset: offset,
            },
        );
        for &v in t.data() {
            match precision {
                Precision::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                Precision::F64 => payload.extend_from_slice(&v.to_le_bytes()),
            }
        }
        offset += (t.numel() * elem_size) as u64;
    }
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.extend_from_slice(&payload);
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(1, "archive missing header terminator"))?;
    let header: IndexMap<String, HeaderEntry> = serde_json::from_slice(&bytes[..newline])?;
    let payload = &bytes[newline + 1..];

    let mut store = ParamStore::new();
    for (name, entry) in &header {
        let numel: usize = entry.shape.iter().product();
        let elem_size = match entry.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => {
                return Err(Error::format(
                    1,
                    format!("unknown dtype {other:?} for parameter {name:?}"),
                ))
            }
        };
        let start = entry.byte_offset as usize;
        let end = start + numel * elem_size;
        if end > payload.len() {
            return Err(Error::format(
                1,
                format!("payload truncated for parameter {name:?}"),
            ));
        }
        let raw = &payload[start..end];
        let data: Vec<f64> = match entry.dtype.as_str() {
            "f32" => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            _ => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        store.insert(name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
    }
    Ok(store)
}
