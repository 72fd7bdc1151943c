//! Single-file checkpoints: `[u64 LE header length][JSON header][f32 LE data]`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};
use crate::tensor::{Real, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model_config: ModelConfig,
    #[serde(default)]
    pub run_config: Option<serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint<T: Real>(
    model: &Model<T>,
    path: impl AsRef<Path>,
    run_config: Option<serde_json::Value>,
) -> Result<()> {
    let path = path.as_ref();
    let mut tensors = Vec::new();
    let mut data = Vec::with_capacity(model.params.num_scalars() * 4);
    for p in model.params.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: "f32".into(),
            offset: data.len(),
        });
        for v in p.value.data() {
            data.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        model_config: model.cfg().clone(),
        run_config,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        f.write_all(&data)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn split(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 8 {
        return Err(Error::Checkpoint("file too short for a header".into()));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let end = 8usize
        .checked_add(len)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| {
            Error::Checkpoint(format!(
                "header length {len} exceeds file size {}",
                bytes.len()
            ))
        })?;
    let value: serde_json::Value = serde_json::from_slice(&bytes[8..end])
        .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    let version = value.get("format_version").and_then(|v| v.as_u64());
    match version {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => return Err(Error::CheckpointVersion(v as u32)),
        None => return Err(Error::Checkpoint("header has no format_version".into())),
    }
    let header: CheckpointHeader = serde_json::from_value(value)
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    Ok((header, &bytes[end..]))
}

pub fn read_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    Ok(split(&fs::read(path)?)?.0)
}

/// Restores a model with the configuration stored in the checkpoint.
pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let bytes = fs::read(path)?;
    let (header, data) = split(&bytes)?;
    let cfg = header.model_config.clone();
    fill(Model::new(cfg, 0)?, &header, data)
}

/// Restores weights into a model built from `cfg`; every parameter must be
/// present with the same shape.
pub fn load_checkpoint_with<T: Real>(
    path: impl AsRef<Path>,
    cfg: &ModelConfig,
) -> Result<Model<T>> {
    let bytes = fs::read(path)?;
    let (header, data) = split(&bytes)?;
    fill(Model::new(cfg.clone(), 0)?, &header, data)
}

fn fill<T: Real>(mut model: Model<T>, header: &CheckpointHeader, data: &[u8]) -> Result<Model<T>> {
    let index: std::collections::HashMap<&str, &TensorEntry> = header
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t))
        .collect();
    for p in model.params.iter_mut() {
        let entry = index.get(p.name.as_str()).ok_or_else(|| {
            Error::Checkpoint(format!("parameter `{}` missing from checkpoint", p.name))
        })?;
        if entry.shape != p.value.shape() {
            return Err(Error::ParamShape {
                name: p.name.clone(),
                expected: p.value.shape().to_vec(),
                found: entry.shape.clone(),
            });
        }
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "unsupported dtype `{}` for {}",
                entry.dtype, p.name
            )));
        }
        let n = p.value.numel();
        let bytes = data
            .get(entry.offset..entry.offset + 4 * n)
            .ok_or_else(|| Error::Checkpoint(format!("data for `{}` is truncated", p.name)))?;
        let vals: Vec<T> = bytes
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect();
        p.value = Tensor::new(entry.shape.clone(), vals)?;
    }
    if header.tensors.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}",
            header.tensors.len(),
            model.params.len()
        )));
    }
    Ok(model)
}
