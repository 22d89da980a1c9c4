//! Incremental change of capability: per-layer mean shifts of last-token
//! hidden states between a fine-tuned and a reference model, and their
//! cosine similarities across tasks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CitiError, Result};
use crate::importance::csv_err;
use crate::model::{HiddenCapture, Model, ProbeSite, SiteKind};
use crate::numerics::{rng_for, Float};
use crate::tasks::{make_probe_input, SyntheticExample};

/// Sequences per capture batch.
const CAPTURE_CHUNK: usize = 64;

/// Norms below this make a cosine undefined.
pub const UNDEFINED_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IccProfile {
    pub task: String,
    pub site: SiteKind,
    /// One `d_model` vector per layer.
    pub layers: Vec<Vec<f64>>,
    pub n_samples: usize,
}

impl IccProfile {
    pub fn norms(&self) -> Vec<f64> {
        self.layers.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect()
    }
}

/// Seeded probe inputs: `n` examples drawn without replacement, each cut at a
/// uniform point of its target.
pub fn probe_inputs(examples: &[SyntheticExample], n: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if examples.is_empty() {
        return Err(CitiError::contract("no examples to draw probe inputs from"));
    }
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    idx.shuffle(&mut rng_for(seed, "probe-sample"));
    idx.truncate(n.min(examples.len()));
    idx.iter()
        .enumerate()
        .map(|(j, &i)| make_probe_input(&examples[i], crate::numerics::derive_seed(seed, &format!("cut{j}"))))
        .collect()
}

/// Per-layer arithmetic mean of injected captures at `site`.
pub fn mean_of_captures(captures: &[HiddenCapture], site: SiteKind, n_layers: usize) -> Result<Vec<Vec<f64>>> {
    if captures.is_empty() {
        return Err(CitiError::contract("mean over an empty probe set"));
    }
    let mut out = Vec::with_capacity(n_layers);
    for layer in 0..n_layers {
        let key = ProbeSite::new(layer, site);
        let mut acc: Option<Vec<f64>> = None;
        for c in captures {
            let v = c
                .get(&key)
                .ok_or_else(|| CitiError::contract(format!("capture lacks layer {layer} {}", site.as_str())))?;
            match &mut acc {
                None => acc = Some(v.clone()),
                Some(a) => {
                    if a.len() != v.len() {
                        return Err(CitiError::contract("captures of different widths"));
                    }
                    for (x, y) in a.iter_mut().zip(v) {
                        *x += y;
                    }
                }
            }
        }
        let n = captures.len() as f64;
        out.push(acc.expect("non-empty").into_iter().map(|x| x / n).collect());
    }
    Ok(out)
}

/// Last-token hidden captures at every layer for `site`, chunked over workers.
pub fn collect_captures<T: Float>(
    model: &Model<T>,
    inputs: &[Vec<usize>],
    site: SiteKind,
    workers: usize,
) -> Result<Vec<HiddenCapture>> {
    if inputs.is_empty() {
        return Err(CitiError::contract("empty probe set"));
    }
    let probes: BTreeSet<ProbeSite> = (0..model.config().n_layers).map(|l| ProbeSite::new(l, site)).collect();
    let chunks: Vec<&[Vec<usize>]> = inputs.chunks(CAPTURE_CHUNK).collect();
    let parts = crate::parallel::map_ordered(&chunks, workers, |chunk| {
        let refs: Vec<&[usize]> = chunk.iter().map(|s| s.as_slice()).collect();
        model.capture_batch(&refs, &probes)
    })?;
    Ok(parts.into_iter().flatten().collect())
}

/// Per-layer mean of last-token hidden states over the probe inputs.
pub fn collect_mean_hidden<T: Float>(
    model: &Model<T>,
    inputs: &[Vec<usize>],
    site: SiteKind,
    workers: usize,
) -> Result<Vec<Vec<f64>>> {
    let caps = collect_captures(model, inputs, site, workers)?;
    mean_of_captures(&caps, site, model.config().n_layers)
}

/// `mean(H_sft) − mean(H_ref)` per layer over identical probe inputs.
pub fn compute_icc<T: Float>(
    reference: &Model<T>,
    sft: &Model<T>,
    inputs: &[Vec<usize>],
    site: SiteKind,
    task: &str,
    workers: usize,
) -> Result<IccProfile> {
    if reference.config() != sft.config() {
        return Err(CitiError::contract("ICC between models with different configs"));
    }
    let a = collect_mean_hidden(sft, inputs, site, workers)?;
    let b = collect_mean_hidden(reference, inputs, site, workers)?;
    let layers = a
        .into_iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(&y).map(|(p, q)| p - q).collect())
        .collect();
    Ok(IccProfile {
        task: task.to_string(),
        site,
        layers,
        n_samples: inputs.len(),
    })
}

/// Per-layer cosine; `None` where either vector is (numerically) zero.
pub fn cosine_similarity(a: &IccProfile, b: &IccProfile) -> Result<Vec<Option<f64>>> {
    if a.site != b.site {
        return Err(CitiError::contract("cosine between profiles of different probe sites"));
    }
    if a.layers.len() != b.layers.len() {
        return Err(CitiError::contract(format!(
            "cosine between profiles with {} and {} layers",
            a.layers.len(),
            b.layers.len()
        )));
    }
    a.layers
        .iter()
        .zip(&b.layers)
        .map(|(x, y)| {
            if x.len() != y.len() {
                return Err(CitiError::contract("profile vectors of different widths"));
            }
            Ok(cosine(x, y))
        })
        .collect()
}

fn cosine(x: &[f64], y: &[f64]) -> Option<f64> {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx < UNDEFINED_NORM || ny < UNDEFINED_NORM {
        return None;
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Some((dot / (nx * ny)).clamp(-1.0, 1.0))
}

/// Pairwise per-layer cosines between labelled profiles of one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub site: SiteKind,
    pub labels: Vec<String>,
    /// `values[layer][i][j]`.
    pub values: Vec<Vec<Vec<Option<f64>>>>,
}

impl SimilarityMatrix {
    pub fn build(profiles: &[(String, &IccProfile)]) -> Result<Self> {
        let (_, first) = profiles
            .first()
            .ok_or_else(|| CitiError::contract("similarity matrix over no profiles"))?;
        let n_layers = first.layers.len();
        let mut values = vec![vec![vec![None; profiles.len()]; profiles.len()]; n_layers];
        for (i, (_, a)) in profiles.iter().enumerate() {
            for (j, (_, b)) in profiles.iter().enumerate() {
                for (l, v) in cosine_similarity(a, b)?.into_iter().enumerate() {
                    values[l][i][j] = v;
                }
            }
        }
        Ok(Self {
            site: first.site,
            labels: profiles.iter().map(|(l, _)| l.clone()).collect(),
            values,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    /// Task increments measured on the tool-trained model.
    Tool,
    /// Task increments measured on the alternate-task-trained model.
    Alt,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::Tool => "tool",
            Condition::Alt => "alt",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub layer: usize,
    pub site: SiteKind,
    pub task: String,
    pub condition: Condition,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub site: SiteKind,
    pub task: String,
    /// Mean over layers with a defined value; `None` if no layer is defined.
    pub mean_tool: Option<f64>,
    pub mean_alt: Option<f64>,
    /// Layers where the tool-condition similarity exceeds the alternate one.
    pub layers_tool_above_alt: Vec<usize>,
}

impl TaskSummary {
    pub fn tool_exceeds_alt(&self) -> bool {
        matches!((self.mean_tool, self.mean_alt), (Some(t), Some(a)) if t > a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoDirectionalReport {
    pub rows: Vec<SimilarityRow>,
    pub summary: Vec<TaskSummary>,
    pub matrices: Vec<SimilarityMatrix>,
}

impl CoDirectionalReport {
    pub fn summary_for(&self, site: SiteKind, task: &str) -> Option<&TaskSummary> {
        self.summary.iter().find(|s| s.site == site && s.task == task)
    }

    /// CSV with columns layer, site, pair, value (empty value = undefined).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "site", "pair", "value"]).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.layer.to_string(),
                r.site.as_str().to_string(),
                format!("tool~{}@{}", r.task, r.condition),
                r.value.map(|v| format!("{v:.9}")).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn mean_defined(v: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

/// Compares Sim(ICC_tool, ICC_t) when task increments come from the
/// tool-trained model against the same similarity when they come from the
/// alternate-trained model. `tool_probes` feed ICC_tool; `task_probes` the
/// general tasks.
pub fn co_directional_report<T: Float>(
    reference: &Model<T>,
    tool_sft: &Model<T>,
    alt_sft: &Model<T>,
    tool_probes: &[Vec<usize>],
    task_probes: &BTreeMap<String, Vec<Vec<usize>>>,
    sites: &[SiteKind],
    workers: usize,
) -> Result<CoDirectionalReport> {
    if reference.config() != tool_sft.config() || reference.config() != alt_sft.config() {
        return Err(CitiError::contract("co-directional report needs config-identical checkpoints"));
    }
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut matrices = Vec::new();
    for &site in sites {
        let tool = compute_icc(reference, tool_sft, tool_probes, site, "TOOLCALL", workers)?;
        let mut labelled: Vec<(String, IccProfile)> = vec![("TOOLCALL@tool".into(), tool.clone())];
        for (task, probes) in task_probes {
            let on_tool = compute_icc(reference, tool_sft, probes, site, task, workers)?;
            let on_alt = compute_icc(reference, alt_sft, probes, site, task, workers)?;
            let sim_tool = cosine_similarity(&tool, &on_tool)?;
            let sim_alt = cosine_similarity(&tool, &on_alt)?;
            for (layer, (a, b)) in sim_tool.iter().zip(&sim_alt).enumerate() {
                rows.push(SimilarityRow {
                    layer,
                    site,
                    task: task.clone(),
                    condition: Condition::Tool,
                    value: *a,
                });
                rows.push(SimilarityRow {
                    layer,
                    site,
                    task: task.clone(),
                    condition: Condition::Alt,
                    value: *b,
                });
            }
            let above = sim_tool
                .iter()
                .zip(&sim_alt)
                .enumerate()
                .filter_map(|(l, (a, b))| match (a, b) {
                    (Some(a), Some(b)) if a > b => Some(l),
                    _ => None,
                })
                .collect();
            summary.push(TaskSummary {
                site,
                task: task.clone(),
                mean_tool: mean_defined(&sim_tool),
                mean_alt: mean_defined(&sim_alt),
                layers_tool_above_alt: above,
            });
            labelled.push((format!("{task}@tool"), on_tool));
            labelled.push((format!("{task}@alt"), on_alt));
        }
        let refs: Vec<(String, &IccProfile)> = labelled.iter().map(|(l, p)| (l.clone(), p)).collect();
        matrices.push(SimilarityMatrix::build(&refs)?);
    }
    Ok(CoDirectionalReport {
        rows,
        summary,
        matrices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tasks::{generate_dataset, TaskKind};

    fn profile(layers: Vec<Vec<f64>>) -> IccProfile {
        IccProfile {
            task: "t".into(),
            site: SiteKind::FfnInput,
            layers,
            n_samples: 1,
        }
    }

    fn small() -> Model<f64> {
        Model::build(ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn cosine_examples() {
        let v = profile(vec![vec![1.0, 2.0, -0.5]]);
        let neg = profile(vec![vec![-1.0, -2.0, 0.5]]);
        assert!((cosine_similarity(&v, &v).unwrap()[0].unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&v, &neg).unwrap()[0].unwrap() + 1.0).abs() < 1e-12);
        let e1 = profile(vec![vec![1.0, 0.0]]);
        let e2 = profile(vec![vec![0.0, 1.0]]);
        assert_eq!(cosine_similarity(&e1, &e2).unwrap()[0], Some(0.0));
        let zero = profile(vec![vec![0.0, 0.0]]);
        assert_eq!(cosine_similarity(&e1, &zero).unwrap()[0], None);
        assert!(cosine_similarity(&e1, &profile(vec![vec![1.0, 0.0], vec![1.0, 0.0]])).is_err());
    }

    #[test]
    fn means_of_injected_captures() {
        let site = ProbeSite::new(0, SiteKind::AttnInput);
        let a: HiddenCapture = [(site, vec![1.0, -2.0])].into();
        let b: HiddenCapture = [(site, vec![-1.0, 2.0])].into();
        let m = mean_of_captures(&[a.clone(), b], SiteKind::AttnInput, 1).unwrap();
        assert_eq!(m, vec![vec![0.0, 0.0]]);
        assert_eq!(mean_of_captures(std::slice::from_ref(&a), SiteKind::AttnInput, 1).unwrap(), vec![vec![1.0, -2.0]]);
        assert!(mean_of_captures(&[], SiteKind::AttnInput, 1).is_err());
    }

    #[test]
    fn identical_models_give_zero_increment() {
        let m = small();
        let data = generate_dataset(TaskKind::Copy, 10, 4).unwrap();
        let probes = probe_inputs(&data, 10, 1).unwrap();
        let p = compute_icc(&m, &m, &probes, SiteKind::FfnInput, "COPY", 1).unwrap();
        assert!(p.layers.iter().flatten().all(|x| *x == 0.0));
        assert_eq!(p.layers.len(), 2);
    }

    #[test]
    fn duplicated_probe_set_keeps_mean() {
        let m = small();
        let data = generate_dataset(TaskKind::Arith, 6, 5).unwrap();
        let probes = probe_inputs(&data, 6, 2).unwrap();
        let mut twice = probes.clone();
        twice.extend(probes.clone());
        let a = collect_mean_hidden(&m, &probes, SiteKind::AttnInput, 1).unwrap();
        let b = collect_mean_hidden(&m, &twice, SiteKind::AttnInput, 2).unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
