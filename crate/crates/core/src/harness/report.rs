//! Run directories, content hashes and manifests linking reports to their inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CitiError, Result};
use crate::model::checkpoint::{self, DATA_FILE, MANIFEST_FILE};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const RUN_FORMAT_VERSION: u32 = 1;

/// JSON text with object keys sorted at every depth.
pub fn canonical_json(value: &Value) -> String {
    match value {
        Value::Object(map) => {
            let sorted: BTreeMap<&String, &Value> = map.iter().collect();
            let body: Vec<String> = sorted
                .into_iter()
                .map(|(k, v)| format!("{}:{}", Value::String(k.clone()), canonical_json(v)))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => format!("[{}]", items.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(hex::encode(Sha256::digest(canonical_json(&v).as_bytes())))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(CitiError::MissingPath(path.to_path_buf()));
    }
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Content id of a checkpoint directory: hash of its manifest and weights.
pub fn checkpoint_id(dir: &Path) -> Result<String> {
    checkpoint::read_manifest(dir)?;
    let mut h = Sha256::new();
    for f in [MANIFEST_FILE, DATA_FILE] {
        let p = dir.join(f);
        if !p.exists() {
            return Err(CitiError::MissingPath(p));
        }
        h.update(fs::read(&p)?);
    }
    Ok(hex::encode(h.finalize())[..16].to_string())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactRef {
    pub kind: String,
    /// Relative to the run directory when inside it.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<ArtifactRef>,
    pub outputs: Vec<ArtifactRef>,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: &str, seed: u64) -> Self {
        Self {
            format_version: RUN_FORMAT_VERSION,
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn entry(root: &Path, path: &Path, kind: &str) -> Result<ArtifactRef> {
        let sha256 = if path.is_dir() {
            checkpoint_id(path)?
        } else {
            file_sha256(path)?
        };
        let shown = path.strip_prefix(root).unwrap_or(path);
        Ok(ArtifactRef {
            kind: kind.to_string(),
            path: shown.to_string_lossy().replace('\\', "/"),
            sha256,
        })
    }

    pub fn add_input(&mut self, root: &Path, path: &Path, kind: &str) -> Result<()> {
        self.inputs.push(Self::entry(root, path, kind)?);
        Ok(())
    }

    pub fn add_output(&mut self, root: &Path, path: &Path, kind: &str) -> Result<()> {
        self.outputs.push(Self::entry(root, path, kind)?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let p = dir.join(RUN_MANIFEST);
        write_json(&p, self)?;
        Ok(p)
    }
}

/// `<out>/<command>-<first 12 hex of the config hash>`.
pub fn run_dir(out: &Path, command: &str, config_hash: &str) -> PathBuf {
    out.join(format!("{command}-{}", &config_hash[..12.min(config_hash.len())]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Replacement,
    Jaccard,
    Selective,
    Icc,
    CitiVsBaselines,
}

/// An experiment request naming the checkpoints it reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub checkpoints: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub params: Value,
}

impl ExperimentSpec {
    /// Every checkpoint exists and all share one model config.
    pub fn validate(&self) -> Result<()> {
        let mut first: Option<(String, crate::model::ModelConfig)> = None;
        for (role, dir) in &self.checkpoints {
            let m = checkpoint::read_manifest(dir)?;
            match &first {
                None => first = Some((role.clone(), m.config)),
                Some((r0, c0)) => {
                    if *c0 != m.config {
                        return Err(CitiError::contract(format!(
                            "checkpoint {role} has a different model config than {r0}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use serde_json::json;

    #[test]
    fn canonical_form_ignores_key_order() {
        let a = json!({"b": 1, "a": {"y": [1, 2], "x": null}});
        let b = json!({"a": {"x": null, "y": [1, 2]}, "b": 1});
        assert_eq!(canonical_json(&a), canonical_json(&b));
        assert_eq!(canonical_json(&a), r#"{"a":{"x":null,"y":[1,2]},"b":1}"#);
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_ne!(config_hash(&a).unwrap(), config_hash(&json!({"b": 2})).unwrap());
    }

    #[test]
    fn spec_validation_checks_paths_and_configs() {
        let dir = tempfile::tempdir().unwrap();
        let small = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            ..ModelConfig::default()
        };
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        checkpoint::save(&Model::<f32>::build(small.clone()).unwrap(), &a).unwrap();
        checkpoint::save(&Model::<f32>::build(ModelConfig { n_layers: 2, ..small }).unwrap(), &b).unwrap();
        let mut spec = ExperimentSpec {
            kind: ExperimentKind::Icc,
            checkpoints: [("ref".to_string(), a.clone()), ("sft".to_string(), a.clone())].into(),
            params: Value::Null,
        };
        spec.validate().unwrap();
        spec.checkpoints.insert("alt".into(), b);
        assert!(spec.validate().is_err());
        spec.checkpoints.insert("alt".into(), dir.path().join("missing"));
        assert!(matches!(spec.validate(), Err(CitiError::MissingPath(_))));
        let id = checkpoint_id(&a).unwrap();
        assert_eq!(id.len(), 16);
        assert_eq!(id, checkpoint_id(&a).unwrap());
    }

    #[test]
    fn manifest_records_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("r.csv");
        fs::write(&f, "x\n").unwrap();
        let mut m = RunManifest::new("eval", "abc", 1);
        m.add_output(dir.path(), &f, "report").unwrap();
        assert_eq!(m.outputs[0].path, "r.csv");
        assert!(m.add_output(dir.path(), &dir.path().join("nope"), "report").is_err());
        let p = m.write(dir.path()).unwrap();
        let back: RunManifest = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
