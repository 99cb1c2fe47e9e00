//! Weights container: `weights.json` lists every tensor (name, shape, dtype,
//! byte range) in topological order together with the architecture, and
//! `weights.bin` holds the little-endian f32 values back to back.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::unet::{NamedTensor, OperatorWeights, UNetConfig};
use crate::error::{Error, Result};
use crate::io::{f32_from_le_bytes, f32_to_le_bytes, read_bytes, read_json, write_atomic, write_json_atomic};

pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: usize,
    byte_length: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsHeader {
    format_version: u32,
    config: UNetConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save_weights(dir: &Path, weights: &OperatorWeights) -> Result<()> {
    weights.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bin = Vec::with_capacity(weights.param_count() * 4);
    let mut entries = Vec::with_capacity(weights.tensors.len());
    for t in &weights.tensors {
        let bytes = f32_to_le_bytes(&t.values);
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            dtype: "f32".into(),
            byte_offset: bin.len(),
            byte_length: bytes.len(),
        });
        bin.extend_from_slice(&bytes);
    }
    let header = WeightsHeader {
        format_version: WEIGHTS_FORMAT_VERSION,
        config: weights.config.clone(),
        tensors: entries,
    };
    write_atomic(&dir.join("weights.bin"), &bin)?;
    write_json_atomic(&dir.join("weights.json"), &header)
}

pub fn load_weights(dir: &Path) -> Result<OperatorWeights> {
    let header_path = dir.join("weights.json");
    let header: WeightsHeader = read_json(&header_path)?;
    if header.format_version != WEIGHTS_FORMAT_VERSION {
        return Err(Error::format(
            &header_path,
            format!("unsupported weights format version {}", header.format_version),
        ));
    }
    let bin_path = dir.join("weights.bin");
    let bin = read_bytes(&bin_path)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        if e.dtype != "f32" {
            return Err(Error::format(&header_path, format!("tensor {} has dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        if e.byte_length != 4 * n || e.byte_offset + e.byte_length > bin.len() {
            return Err(Error::format(&bin_path, format!("tensor {} byte range is inconsistent", e.name)));
        }
        tensors.push(NamedTensor {
            values: f32_from_le_bytes(&bin[e.byte_offset..e.byte_offset + e.byte_length], &bin_path)?,
            name: e.name,
            shape: e.shape,
        });
    }
    let weights = OperatorWeights {
        config: header.config,
        tensors,
    };
    weights
        .validate()
        .map_err(|e| Error::format(&header_path, e.to_string()))?;
    Ok(weights)
}
