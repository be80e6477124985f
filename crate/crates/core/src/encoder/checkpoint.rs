use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_weights, EncoderError, Model, ModelConfig, Result};
use crate::numerics::{Array, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AUMC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the payload.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

fn bad(msg: impl Into<String>) -> EncoderError {
    EncoderError::Checkpoint(msg.into())
}

/// Layout: `AUMC`, version (u32 LE), header length (u64 LE), JSON header
/// with the config and `(name, shape, offset)` per tensor, then all tensors
/// as little-endian f32.
pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Model<T>) -> Result<()> {
    let named = model.weights.named();
    let mut offset = 0;
    let tensors = named
        .iter()
        .map(|(name, a)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: a.shape().to_vec(),
                offset,
            };
            offset += a.len();
            e
        })
        .collect();
    let header = Header {
        config: model.config.clone(),
        dtype: "f32".into(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, a) in &named {
        for &v in a.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint, validating every tensor against the echoed config.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut pre = [0u8; 16];
    r.read_exact(&mut pre).map_err(|_| bad("truncated checkpoint preamble"))?;
    if &pre[..4] != CHECKPOINT_MAGIC {
        return Err(bad(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(pre[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(pre[8..16].try_into().expect("8 bytes")) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| bad("truncated checkpoint header"))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.dtype != "f32" {
        return Err(bad(format!("unsupported dtype {}", header.dtype)));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() % 4 != 0 {
        return Err(bad("payload is not a whole number of f32 values"));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();

    let layout = init_weights::<T>(&header.config, 0)?;
    let named = layout.named();
    if named.len() != header.tensors.len() {
        return Err(bad(format!(
            "config implies {} tensors, checkpoint lists {}",
            named.len(),
            header.tensors.len()
        )));
    }
    let mut arrays = Vec::with_capacity(named.len());
    for ((name, want), entry) in named.iter().zip(&header.tensors) {
        if *name != entry.name || want.shape() != entry.shape.as_slice() {
            return Err(bad(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                entry.name,
                entry.shape,
                name,
                want.shape()
            )));
        }
        let end = entry.offset + want.len();
        let slice = values
            .get(entry.offset..end)
            .ok_or_else(|| bad(format!("tensor {name} runs past the payload")))?;
        arrays.push(Array::new(
            &entry.shape,
            slice.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )?);
    }
    Ok(Model {
        weights: layout.with_handles(arrays),
        config: header.config,
    })
}
