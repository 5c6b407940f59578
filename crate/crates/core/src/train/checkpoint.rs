//! Checkpoint files: `TCKP`, u32 version, u64 header length, a JSON header
//! (model config, tensor table, free-form metadata), then the tensors as
//! concatenated little-endian f32 blobs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TabIcl};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob section.
    pub offset: u64,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &TabIcl<f32>, meta: serde_json::Value) -> Result<()> {
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    for id in model.params.ids() {
        let value = model.params.get(id);
        tensors.push(TensorEntry {
            name: model.params.name(id).to_string(),
            shape: value.shape().to_vec(),
            offset,
            dtype: "f32".into(),
        });
        offset += 4 * value.numel() as u64;
    }
    let header = CheckpointHeader {
        model: model.config.clone(),
        tensors,
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut blob = Vec::with_capacity(offset as usize);
    for id in model.params.ids() {
        for v in model.params.get(id).data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&blob)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(TabIcl<f32>, CheckpointHeader)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("missing TCKP magic".into()));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut v8 = [0u8; 8];
    r.read_exact(&mut v8)?;
    let len = usize::try_from(u64::from_le_bytes(v8)).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let mut model = TabIcl::<f32>::new(header.model.clone(), 0)?;
    if header.tensors.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, model has {}",
            header.tensors.len(),
            model.params.len()
        )));
    }
    for entry in &header.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!("{}: dtype {}", entry.name, entry.dtype)));
        }
        let id = model
            .params
            .find(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", entry.name)))?;
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let bytes = blob
            .get(start..start + 4 * numel)
            .ok_or_else(|| Error::Checkpoint(format!("{}: blob truncated", entry.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        model
            .params
            .set(id, Tensor::new(entry.shape.clone(), data)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok((model, header))
}

pub fn save(path: &Path, model: &TabIcl<f32>, meta: serde_json::Value) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), model, meta)
}

pub fn load(path: &Path) -> Result<(TabIcl<f32>, CheckpointHeader)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
