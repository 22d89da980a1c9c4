//! Checkpoint directories: `manifest.json` plus one little-endian f32 blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::component::ComponentId;
use super::transformer::{Model, ModelConfig};
use crate::error::{CitiError, Result};
use crate::molora::AdapterConfig;
use crate::numerics::{DType, Float, ParamStore, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data file.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterEntry {
    pub component: String,
    pub config: AdapterConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub dtype: DType,
    pub data_file: String,
    pub params: Vec<ParamEntry>,
    pub adapters: Vec<AdapterEntry>,
}

pub fn save<T: Float>(model: &Model<T>, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::new();
    let mut params = Vec::new();
    for (_, p) in model.params().iter() {
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            offset: bytes.len(),
            trainable: p.trainable,
        });
        for v in p.tensor.data() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        dtype: DType::F32,
        data_file: DATA_FILE.into(),
        params,
        adapters: model
            .adapter_configs()
            .into_iter()
            .map(|(c, config)| AdapterEntry {
                component: c.to_string(),
                config,
            })
            .collect(),
    };
    fs::write(dir.join(DATA_FILE), bytes)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(CitiError::MissingPath(path));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CitiError::contract(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

pub fn load<T: Float>(dir: &Path) -> Result<Model<T>> {
    let manifest = read_manifest(dir)?;
    if manifest.dtype != DType::F32 {
        return Err(CitiError::contract("checkpoint data must be f32"));
    }
    let data_path = dir.join(&manifest.data_file);
    if !data_path.exists() {
        return Err(CitiError::MissingPath(data_path));
    }
    let bytes = fs::read(&data_path)?;
    let mut store = ParamStore::new();
    for e in &manifest.params {
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        if end > bytes.len() {
            return Err(CitiError::contract(format!("parameter {} runs past the data file", e.name)));
        }
        let vals = bytes[e.offset..end]
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        store.add(e.name.clone(), Tensor::new(e.shape.clone(), vals)?, e.trainable)?;
    }
    let mut adapters = BTreeMap::new();
    for a in &manifest.adapters {
        let id: ComponentId = a.component.parse()?;
        adapters.insert(id, a.config);
    }
    Model::from_store(manifest.config, store, &adapters)
}
