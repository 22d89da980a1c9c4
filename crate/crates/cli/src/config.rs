//! Run configuration: one JSON document with every pipeline parameter.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use citi_core::harness::{config_hash, DataConfig, Method, SelectiveConfig};
use citi_core::importance::SelectMode;
use citi_core::model::ModelConfig;
use citi_core::tasks::Vocabulary;
use citi_core::trainer::{PretrainConfig, TrainConfig};
use citi_core::CitiError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            max_seq_len: m.max_seq_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplacementSection {
    pub fractions: Vec<f64>,
    pub modes: Vec<SelectMode>,
}

impl Default for ReplacementSection {
    fn default() -> Self {
        Self {
            fractions: vec![0.0, 0.2, 0.5, 1.0],
            modes: vec![SelectMode::Top, SelectMode::Bottom, SelectMode::Random],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub format_version: u32,
    /// Drives model init, data generation, shuffling and adapter init.
    pub seed: u64,
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub selective: SelectiveConfig,
    pub replacement: ReplacementSection,
    /// Rows of the comparison table.
    pub methods: Vec<Method>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            seed: 0,
            model: ModelSection::default(),
            pretrain: PretrainConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::desk(),
            selective: SelectiveConfig::default(),
            replacement: ReplacementSection::default(),
            methods: Method::TABLE.to_vec(),
        }
    }
}

fn section(name: &str, r: Result<(), CitiError>) -> Result<()> {
    r.map_err(|e| anyhow::anyhow!("{name}: {e}"))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            bail!(
                "format_version = {} unsupported (expected {FORMAT_VERSION})",
                self.format_version
            );
        }
        section("model", self.model_config().validate())?;
        section("pretrain", self.pretrain_config().validate())?;
        section("data", self.data_config().validate())?;
        section("train", self.train_config().validate())?;
        section("selective", self.selective.validate())?;
        if self.replacement.modes.is_empty() {
            bail!("replacement.modes must not be empty");
        }
        for f in &self.replacement.fractions {
            if !(0.0..=1.0).contains(f) {
                bail!("replacement.fractions entry {f} outside [0, 1]");
            }
        }
        if self.methods.is_empty() {
            bail!("methods must not be empty");
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.model.n_layers,
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            vocab_size: Vocabulary::standard().len(),
            max_seq_len: self.model.max_seq_len,
            seed: self.seed,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            seed: self.seed,
            ..self.pretrain.clone()
        }
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            seed: self.seed,
            ..self.data.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Hash of the canonical JSON form, seed included.
    pub fn hash(&self) -> Result<String> {
        Ok(config_hash(self)?)
    }
}

/// Reads, fills defaults and validates. A missing path yields the defaults
/// only when `path` is `None`.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        None => RunConfig::default(),
        Some(p) => {
            if !p.exists() {
                return Err(CitiError::MissingPath(p.to_path_buf()).into());
            }
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}
