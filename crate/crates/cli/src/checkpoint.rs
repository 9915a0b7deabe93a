//! Model checkpoints: a JSON manifest followed by one tensor-file section
//! per named parameter.
//!
//! Layout: `"COSTCKPT"` · version `u32` · manifest length `u32` · manifest
//! JSON · CRC32 of the manifest `u32` · sections in manifest order.

use std::path::Path;

use cost_core::model::{Dit, ModelConfig};
use cost_tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::tensorfile;

pub const MAGIC: &[u8; 8] = b"COSTCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the section, relative to the first section.
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub model: ModelConfig,
    pub params: Vec<ParamEntry>,
    /// Optimizer steps taken before saving.
    pub train_steps: u64,
    pub config_hash: String,
}

pub fn encode(model: &Dit<f32>, train_steps: u64, config_hash: &str) -> Result<Vec<u8>> {
    let mut sections = Vec::new();
    let mut params = Vec::new();
    for (name, t) in model.named_params() {
        let bytes = tensorfile::encode(t)?;
        params.push(ParamEntry {
            name,
            shape: t.shape().to_vec(),
            offset: sections.len() as u64,
            length: bytes.len() as u64,
        });
        sections.extend_from_slice(&bytes);
    }
    let manifest = Manifest { model: model.config.clone(), params, train_steps, config_hash: config_hash.into() };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(20 + json.len() + sections.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&crc32fast::hash(&json).to_le_bytes());
    out.extend_from_slice(&sections);
    Ok(out)
}

fn field<'a>(bytes: &'a [u8], at: usize, len: usize) -> Result<&'a [u8]> {
    bytes.get(at..at + len).ok_or(CliError::Truncated { needed: at + len, available: bytes.len() })
}

pub fn decode(bytes: &[u8]) -> Result<(Dit<f32>, Manifest)> {
    if field(bytes, 0, 8)? != MAGIC {
        return Err(CliError::BadMagic { expected: "COSTCKPT" });
    }
    let u32_at = |at| -> Result<u32> { Ok(u32::from_le_bytes(field(bytes, at, 4)?.try_into().expect("4 bytes"))) };
    let version = u32_at(8)?;
    if version != VERSION {
        return Err(CliError::Version(version));
    }
    let len = u32_at(12)? as usize;
    let json = field(bytes, 16, len)?;
    let stored = u32_at(16 + len)?;
    let computed = crc32fast::hash(json);
    if stored != computed {
        return Err(CliError::Crc { stored, computed });
    }
    let manifest: Manifest = serde_json::from_slice(json)?;
    let base = 20 + len;
    // Parameters are overwritten below; the init stream only fixes shapes.
    let mut model = Dit::new(manifest.model.clone(), &mut Rng::new(0))?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    if names.len() != manifest.params.len() {
        return Err(CliError::Checkpoint(format!(
            "manifest lists {} parameters, model has {}",
            manifest.params.len(),
            names.len()
        )));
    }
    let mut end = base;
    for ((slot, name), entry) in model.params_mut().into_iter().zip(&names).zip(&manifest.params) {
        if &entry.name != name {
            return Err(CliError::Checkpoint(format!("expected parameter {name}, found {}", entry.name)));
        }
        let start = base + entry.offset as usize;
        let section = field(bytes, start, entry.length as usize)?;
        let (t, used) = tensorfile::decode(section)?;
        let t: Tensor<f32> = t.into_f32()?;
        if used != section.len() || t.shape() != slot.shape() || t.shape() != entry.shape.as_slice() {
            return Err(CliError::Checkpoint(format!("section {name} has shape {:?}", t.shape())));
        }
        *slot = t;
        end = end.max(start + section.len());
    }
    if end != bytes.len() {
        return Err(CliError::Checkpoint(format!("{} trailing bytes", bytes.len() - end)));
    }
    Ok((model, manifest))
}

pub fn save(path: &Path, model: &Dit<f32>, train_steps: u64, config_hash: &str) -> Result<()> {
    let bytes = encode(model, train_steps, config_hash)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> Result<(Dit<f32>, Manifest)> {
    if !path.exists() {
        return Err(CliError::MissingCheckpoint(path.display().to_string()));
    }
    decode(&std::fs::read(path).map_err(|e| CliError::io(path, e))?)
}
