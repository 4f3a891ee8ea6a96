//! Checkpoint container: magic, version, JSON header describing the config
//! and tensor table, then named little-endian `f64` blobs. Parameters are
//! stored per named tensor; optimizer moments ride along as `m.<name>` /
//! `v.<name>` so a load restores training exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, ModelError, ModelState};

const MAGIC: &[u8; 8] = b"CFLBCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Write the full model state (parameters, moments, step) to `path`.
pub fn save(state: &ModelState, path: &Path) -> Result<(), ModelError> {
    let mut tensors = Vec::new();
    let mut order: Vec<(usize, usize)> = Vec::new(); // (offset, len) into each buffer
    for spec in &state.layout().specs {
        tensors.push(TensorEntry {
            name: spec.name.clone(),
            shape: spec.shape.clone(),
        });
        order.push((spec.offset, spec.len()));
    }
    for prefix in ["m", "v"] {
        for spec in &state.layout().specs {
            tensors.push(TensorEntry {
                name: format!("{prefix}.{}", spec.name),
                shape: spec.shape.clone(),
            });
        }
    }
    let header = Header {
        version: VERSION,
        config: state.config,
        step: state.step,
        tensors,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| ModelError::Checkpoint(format!("header encode: {e}")))?;

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(header_json.len() as u32).to_le_bytes())?;
    out.write_all(&header_json)?;
    for buffer in [&state.params, &state.adam_m, &state.adam_v] {
        for &(offset, len) in &order {
            for &value in &buffer[offset..offset + len] {
                out.write_all(&value.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Load a checkpoint written by [`save`], validating names and shapes
/// against the layout implied by the stored config.
pub fn load(path: &Path) -> Result<ModelState, ModelError> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    input.read_exact(&mut word)?;
    let header_len = u32::from_le_bytes(word) as usize;
    let mut header_bytes = vec![0u8; header_len];
    input.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| ModelError::Checkpoint(format!("header decode: {e}")))?;

    // Template state gives the expected tensor table for this config.
    let template = ModelState::new(header.config, 0)?;
    let specs = template.layout().specs.clone();
    let total = template.num_params();
    let expected: Vec<TensorEntry> = {
        let mut v: Vec<TensorEntry> = specs
            .iter()
            .map(|s| TensorEntry {
                name: s.name.clone(),
                shape: s.shape.clone(),
            })
            .collect();
        for prefix in ["m", "v"] {
            for s in &specs {
                v.push(TensorEntry {
                    name: format!("{prefix}.{}", s.name),
                    shape: s.shape.clone(),
                });
            }
        }
        v
    };
    if header.tensors.len() != expected.len() {
        return Err(ModelError::Checkpoint(format!(
            "tensor count {} does not match layout ({})",
            header.tensors.len(),
            expected.len()
        )));
    }
    for (got, want) in header.tensors.iter().zip(&expected) {
        if got.name != want.name || got.shape != want.shape {
            return Err(ModelError::Checkpoint(format!(
                "tensor mismatch: file has {} {:?}, layout wants {} {:?}",
                got.name, got.shape, want.name, want.shape
            )));
        }
    }

    let mut read_buffer = |len: usize| -> Result<Vec<f64>, ModelError> {
        let mut bytes = vec![0u8; len * 8];
        input.read_exact(&mut bytes)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let params = read_buffer(total)?;
    let adam_m = read_buffer(total)?;
    let adam_v = read_buffer(total)?;
    let mut trailing = Vec::new();
    input.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(ModelError::Checkpoint(format!(
            "{} unexpected trailing bytes",
            trailing.len()
        )));
    }

    ModelState::from_parts(header.config, params, adam_m, adam_v, header.step)
}
