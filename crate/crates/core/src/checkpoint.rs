//! Checkpoint file: a JSON manifest (config, tensor names, shapes, byte
//! offsets) followed by a raw little-endian f32 payload, behind the magic
//! string "STAS1".

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Real;

pub const MAGIC: &[u8; 5] = b"STAS1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    /// Element count.
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub phase: String,
    /// Epochs completed.
    pub epoch: u64,
    /// Global optimizer steps taken.
    pub step: u64,
    pub optimizer: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train_state: Option<TrainState>,
    pub norm: Option<NormStats>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, (Vec<f32>, Vec<usize>)>,
}

/// Serialize model weights plus any extra tensors (e.g. optimizer state).
pub fn save<F: Real>(
    path: &Path,
    model: &mut Model<F>,
    extra: &[(String, Vec<f32>, Vec<usize>)],
    train_state: Option<TrainState>,
    norm: Option<NormStats>,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut put = |name: &str, data: &[f32], shape: &[usize], entries: &mut Vec<TensorEntry>| {
        let offset = payload.len() as u64;
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
            len: data.len() as u64,
        });
    };
    for (name, data, shape) in model.state_tensors() {
        put(&name, &data, &shape, &mut entries);
    }
    for (name, data, shape) in extra {
        put(name, data, shape, &mut entries);
    }
    let manifest = Manifest {
        format_version: 1,
        model: model.config().clone(),
        train_state,
        norm,
        tensors: entries,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest encode: {e}")))?;

    let mut file = fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&manifest_bytes)?;
    file.write_all(&payload)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    let manifest_end = 13 + mlen;
    if bytes.len() < manifest_end {
        return Err(Error::Checkpoint("manifest truncated".to_string()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[13..manifest_end])
        .map_err(|e| Error::Checkpoint(format!("manifest decode: {e}")))?;
    let payload = &bytes[manifest_end..];
    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        let start = e.offset as usize;
        let end = start + e.len as usize * 4;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} exceeds payload ({} > {})",
                e.name,
                end,
                payload.len()
            )));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.insert(e.name.clone(), (data, e.shape.clone()));
    }
    Ok(Checkpoint { manifest, tensors })
}

/// Rebuild a model from a checkpoint.
pub fn load_model<F: Real>(path: &Path) -> Result<(Model<F>, Checkpoint)> {
    let ckpt = load(path)?;
    let mut model = Model::new(ckpt.manifest.model.clone())?;
    model.load_state_tensors(&ckpt.tensors)?;
    Ok((model, ckpt))
}
