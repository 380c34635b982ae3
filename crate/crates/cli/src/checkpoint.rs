//! Model checkpoints ("DWTK1"): the binary container with a JSON header
//! holding the model config and a tensor table (name, shape, element
//! offset), followed by all tensor data as little-endian f64.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use distilkit_core::model::{ModelConfig, ToyModelParams};

use crate::binfile::{read_container, write_container};
use crate::validation;

const MAGIC: &[u8; 5] = b"DWTK1";

/// Serializable mirror of [`ModelConfig`] (the core crate carries no serde).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConfigJson {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub width: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_positions: usize,
    pub downsample: usize,
}

impl From<ModelConfig> for ConfigJson {
    fn from(c: ModelConfig) -> Self {
        ConfigJson {
            enc_layers: c.enc_layers,
            dec_layers: c.dec_layers,
            width: c.width,
            heads: c.heads,
            vocab: c.vocab,
            max_positions: c.max_positions,
            downsample: c.downsample,
        }
    }
}

impl From<ConfigJson> for ModelConfig {
    fn from(c: ConfigJson) -> Self {
        ModelConfig {
            enc_layers: c.enc_layers,
            dec_layers: c.dec_layers,
            width: c.width,
            heads: c.heads,
            vocab: c.vocab,
            max_positions: c.max_positions,
            downsample: c.downsample,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Element offset into the payload.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ConfigJson,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint(path: &Path, params: &ToyModelParams) -> anyhow::Result<()> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, mat) in params.named_tensors() {
        tensors.push(TensorEntry {
            name,
            rows: mat.rows(),
            cols: mat.cols(),
            offset: payload.len(),
        });
        payload.extend_from_slice(mat.data());
    }
    let header = Header { config: params.config.into(), tensors };
    write_container(path, MAGIC, &header, &payload)
}

pub fn read_checkpoint(path: &Path) -> anyhow::Result<ToyModelParams> {
    let (header, payload): (Header, Vec<f64>) = read_container(path, MAGIC)?;
    let config: ModelConfig = header.config.into();
    let mut params = ToyModelParams::init(config, 0)
        .map_err(|e| validation(format!("{}: {e}", path.display())))?
        .zeros_like();
    let mut table: HashMap<&str, &TensorEntry> =
        header.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    if table.len() != header.tensors.len() {
        return Err(validation(format!("{}: duplicate tensor names", path.display())));
    }
    for (name, slot) in params.named_tensors_mut() {
        let entry = table.remove(name.as_str()).ok_or_else(|| {
            validation(format!("{}: missing tensor {name}", path.display()))
        })?;
        if entry.rows != slot.rows() || entry.cols != slot.cols() {
            return Err(validation(format!(
                "{}: tensor {name} is {}x{}, expected {}x{}",
                path.display(),
                entry.rows,
                entry.cols,
                slot.rows(),
                slot.cols()
            )));
        }
        let end = entry.offset + entry.rows * entry.cols;
        let data = payload.get(entry.offset..end).ok_or_else(|| {
            validation(format!("{}: tensor {name} overruns the payload", path.display()))
        })?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(validation(format!(
                "{}: tensor {name} holds non-finite values",
                path.display()
            )));
        }
        slot.data_mut().copy_from_slice(data);
    }
    if let Some(extra) = table.keys().next() {
        return Err(validation(format!("{}: unknown tensor {extra}", path.display())));
    }
    Ok(params)
}
