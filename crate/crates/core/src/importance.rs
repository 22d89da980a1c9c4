//! First-order component importance, normalization, rankings and the
//! component-level experiments built on them.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Discrete, Hypergeometric};

use crate::error::{CitiError, Result};
use crate::model::{swap_component_weights, ComponentId, Model, Pair};
use crate::numerics::{rng_for, Float, Graph};
use crate::tasks::SyntheticExample;

/// Examples per scoring shard. Fixed so results do not depend on the worker count.
pub const SHARD_SIZE: usize = 64;

/// Raw I_h for every registry component on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub label: String,
    pub scores: BTreeMap<ComponentId, f64>,
    pub n_samples: usize,
}

impl ImportanceTable {
    pub fn total(&self) -> f64 {
        self.scores.values().sum()
    }

    /// Each score divided by the table total.
    pub fn shares(&self) -> Result<BTreeMap<ComponentId, f64>> {
        let total = self.total();
        if !(total > 0.0) {
            return Err(CitiError::contract(format!(
                "importance table '{}' has no positive score",
                self.label
            )));
        }
        Ok(self.scores.iter().map(|(k, v)| (*k, v / total)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreKind {
    /// Tool-dataset normalization; sums to one.
    M,
    /// Sum of per-task normalized general tables; sums to the task count.
    C,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedScores {
    pub kind: ScoreKind,
    pub scores: BTreeMap<ComponentId, f64>,
}

impl NormalizedScores {
    /// Components by descending score, ties in (layer, slot) order.
    pub fn ranking(&self) -> Vec<ComponentId> {
        let mut ids: Vec<(ComponentId, f64)> = self.scores.iter().map(|(k, v)| (*k, *v)).collect();
        ids.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ids.into_iter().map(|(k, _)| k).collect()
    }
}

/// Descending ranking cut into three near-equal groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingPartition {
    pub order: Vec<ComponentId>,
    pub high: Vec<ComponentId>,
    pub moderate: Vec<ComponentId>,
    pub low: Vec<ComponentId>,
}

fn check_samples(dataset: &[SyntheticExample], n_samples: usize) -> Result<()> {
    if n_samples == 0 {
        return Err(CitiError::contract("n_samples must be at least 1"));
    }
    if dataset.is_empty() {
        return Err(CitiError::contract("importance scoring on an empty dataset"));
    }
    Ok(())
}

/// Seeded sample without replacement; the whole dataset if it is small enough.
pub fn sample_examples(dataset: &[SyntheticExample], n_samples: usize, seed: u64) -> Vec<&SyntheticExample> {
    if n_samples >= dataset.len() {
        return dataset.iter().collect();
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut rng_for(seed, "importance-sample"));
    idx.truncate(n_samples);
    idx.sort_unstable();
    idx.into_iter().map(|i| &dataset[i]).collect()
}

/// Signed Σ θ_h ⊙ ∂L/∂θ_h for one shard, with L the shard's mean NLL.
fn shard_inner_products<T: Float>(model: &Model<T>, shard: &[&SyntheticExample]) -> Result<Vec<f64>> {
    let pairs: Vec<Pair<'_>> = shard
        .iter()
        .map(|e| Pair {
            prompt: &e.prompt,
            target: &e.target,
        })
        .collect();
    let mut g = Graph::new();
    let (loss, _) = model.nll_graph(&mut g, &pairs)?;
    let grads = g.backward(loss)?;
    let mut out = Vec::with_capacity(model.registry().len());
    for (cid, pid) in model.registry().iter() {
        let theta = model.params().get(*pid).tensor.data();
        let s = match grads.get(*pid) {
            None => 0.0,
            Some(grad) => {
                if !grad.all_finite() {
                    return Err(CitiError::numeric(format!("non-finite gradient at component {cid}")));
                }
                theta
                    .iter()
                    .zip(grad.data())
                    .map(|(a, b)| a.as_f64() * b.as_f64())
                    .sum()
            }
        };
        out.push(s);
    }
    Ok(out)
}

/// I_h = |Σ θ_h ⊙ ∂L/∂θ_h| with L the mean NLL over up to `n_samples` examples.
pub fn component_importance<T: Float>(
    model: &Model<T>,
    dataset: &[SyntheticExample],
    n_samples: usize,
    seed: u64,
    label: &str,
) -> Result<ImportanceTable> {
    component_importance_parallel(model, dataset, n_samples, seed, label, 1)
}

/// As [`component_importance`], fanning shards out over `workers` threads.
/// Shard boundaries and reduction order are fixed, so the result does not
/// depend on `workers`.
pub fn component_importance_parallel<T: Float>(
    model: &Model<T>,
    dataset: &[SyntheticExample],
    n_samples: usize,
    seed: u64,
    label: &str,
    workers: usize,
) -> Result<ImportanceTable> {
    check_samples(dataset, n_samples)?;
    let sample = sample_examples(dataset, n_samples, seed);
    let shards: Vec<&[&SyntheticExample]> = sample.chunks(SHARD_SIZE).collect();
    let per_shard = crate::parallel::map_ordered(&shards, workers, |s| shard_inner_products(model, s))?;
    let n = sample.len() as f64;
    let mut acc = vec![0.0; model.registry().len()];
    for (shard, contrib) in shards.iter().zip(&per_shard) {
        let w = shard.len() as f64 / n;
        for (a, c) in acc.iter_mut().zip(contrib) {
            *a += w * c;
        }
    }
    let scores = model
        .registry()
        .ids()
        .zip(acc)
        .map(|(id, s)| (id, s.abs()))
        .collect();
    Ok(ImportanceTable {
        label: label.to_string(),
        scores,
        n_samples: sample.len(),
    })
}

/// |L(θ) − L(θ | θ_h = 0)| over the whole dataset; the model is restored afterward.
pub fn ablate_component<T: Float>(model: &mut Model<T>, id: ComponentId, dataset: &[SyntheticExample]) -> Result<f64> {
    let pairs: Vec<Pair<'_>> = dataset
        .iter()
        .map(|e| Pair {
            prompt: &e.prompt,
            target: &e.target,
        })
        .collect();
    let base = model.batch_nll(&pairs)?;
    let pid = model.component_param(id)?;
    let saved = model.params().get(pid).tensor.clone();
    model.params_mut().get_mut(pid).tensor.fill(T::zero());
    let ablated = model.batch_nll(&pairs);
    model.params_mut().get_mut(pid).tensor = saved;
    Ok((base - ablated?).abs())
}

/// M_h: tool scores divided by their total.
pub fn normalize_tool_scores(table: &ImportanceTable) -> Result<NormalizedScores> {
    Ok(NormalizedScores {
        kind: ScoreKind::M,
        scores: table.shares()?,
    })
}

/// C_h: sum over tasks of each task's normalized share.
pub fn aggregate_general_scores(tables: &[ImportanceTable]) -> Result<NormalizedScores> {
    let first = tables
        .first()
        .ok_or_else(|| CitiError::contract("no general-task tables to aggregate"))?;
    let keys: BTreeSet<ComponentId> = first.scores.keys().copied().collect();
    let mut scores: BTreeMap<ComponentId, f64> = keys.iter().map(|k| (*k, 0.0)).collect();
    for t in tables {
        if !t.scores.keys().copied().eq(keys.iter().copied()) {
            return Err(CitiError::contract(format!(
                "table '{}' covers a different component set than '{}'",
                t.label, first.label
            )));
        }
        for (k, v) in t.shares()? {
            *scores.get_mut(&k).expect("same keys") += v;
        }
    }
    Ok(NormalizedScores {
        kind: ScoreKind::C,
        scores,
    })
}

pub fn rank_and_partition(scores: &NormalizedScores) -> RankingPartition {
    let order = scores.ranking();
    let n = order.len();
    let a = n.div_ceil(3);
    let b = a + (n - a).div_ceil(2);
    RankingPartition {
        high: order[..a].to_vec(),
        moderate: order[a..b].to_vec(),
        low: order[b..].to_vec(),
        order,
    }
}

pub fn jaccard_index(a: &BTreeSet<ComponentId>, b: &BTreeSet<ComponentId>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Expected Jaccard index of two independent uniformly random `k`-subsets of `n` items.
pub fn expected_random_jaccard(n: usize, k: usize) -> Result<f64> {
    if k > n {
        return Err(CitiError::contract(format!("group size {k} exceeds population {n}")));
    }
    if k == 0 {
        return Ok(1.0);
    }
    let dist = Hypergeometric::new(n as u64, k as u64, k as u64)
        .map_err(|e| CitiError::contract(format!("hypergeometric null: {e}")))?;
    Ok((0..=k)
        .map(|i| dist.pmf(i as u64) * i as f64 / (2 * k - i) as f64)
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectMode {
    Top,
    Bottom,
    Random,
}

impl SelectMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectMode::Top => "top",
            SelectMode::Bottom => "bottom",
            SelectMode::Random => "random",
        }
    }
}

impl std::str::FromStr for SelectMode {
    type Err = CitiError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(SelectMode::Top),
            "bottom" => Ok(SelectMode::Bottom),
            "random" => Ok(SelectMode::Random),
            other => Err(CitiError::contract(format!("unknown selection mode {other}"))),
        }
    }
}

/// `round(fraction × n)` components chosen by rank or at random.
pub fn select_by_rank(
    scores: &NormalizedScores,
    mode: SelectMode,
    fraction: f64,
    seed: u64,
) -> Result<BTreeSet<ComponentId>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CitiError::contract(format!("fraction {fraction} outside (0, 1]")));
    }
    let order = scores.ranking();
    let k = (fraction * order.len() as f64).round() as usize;
    Ok(match mode {
        SelectMode::Top => order[..k].iter().copied().collect(),
        SelectMode::Bottom => order[order.len() - k..].iter().copied().collect(),
        SelectMode::Random => {
            let mut ids: Vec<ComponentId> = scores.scores.keys().copied().collect();
            ids.shuffle(&mut rng_for(seed, "select-random"));
            ids.into_iter().take(k).collect()
        }
    })
}

/// Per-task accuracies of one model, keyed by task label.
pub type Accuracies = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplacementRow {
    pub mode: SelectMode,
    pub fraction: f64,
    pub n_swapped: usize,
    pub accuracies: Accuracies,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplacementReport {
    pub vanilla: Accuracies,
    pub finetuned: Accuracies,
    pub rows: Vec<ReplacementRow>,
}

impl ReplacementReport {
    /// Accuracy drop relative to the vanilla model for one row and task.
    pub fn drop(&self, row: &ReplacementRow, task: &str) -> Option<f64> {
        Some(self.vanilla.get(task)? - row.accuracies.get(task)?)
    }
}

/// Copies the selected finetuned components into the vanilla model and evaluates.
/// A fraction of zero keeps the vanilla model untouched.
pub fn replacement_experiment<F>(
    vanilla: &Model<f32>,
    finetuned: &Model<f32>,
    scores: &NormalizedScores,
    fractions: &[f64],
    modes: &[SelectMode],
    evaluate: F,
) -> Result<ReplacementReport>
where
    F: Fn(&Model<f32>) -> Result<Accuracies>,
{
    if vanilla.config() != finetuned.config() {
        return Err(CitiError::contract("replacement between models with different configs"));
    }
    let base = evaluate(vanilla)?;
    let tuned = evaluate(finetuned)?;
    let mut rows = Vec::new();
    for &mode in modes {
        for &fraction in fractions {
            let ids = if fraction == 0.0 {
                BTreeSet::new()
            } else {
                select_by_rank(scores, mode, fraction, 0)?
            };
            let swapped = swap_component_weights(vanilla, finetuned, &ids)?;
            rows.push(ReplacementRow {
                mode,
                fraction,
                n_swapped: ids.len(),
                accuracies: evaluate(&swapped)?,
            });
        }
    }
    Ok(ReplacementReport {
        vanilla: base,
        finetuned: tuned,
        rows,
    })
}

#[derive(Debug, Serialize)]
struct ScoreRow<'a> {
    component: String,
    layer: usize,
    slot: &'a str,
    raw: f64,
    normalized: f64,
    rank: usize,
}

/// CSV with columns component, layer, slot, raw, normalized, rank.
pub fn write_scores_csv<W: Write>(out: W, table: &ImportanceTable, normalized: &NormalizedScores) -> Result<()> {
    let rank: BTreeMap<ComponentId, usize> = normalized
        .ranking()
        .into_iter()
        .enumerate()
        .map(|(i, c)| (c, i + 1))
        .collect();
    let mut w = csv::Writer::from_writer(out);
    for (id, raw) in &table.scores {
        w.serialize(ScoreRow {
            component: id.to_string(),
            layer: id.layer,
            slot: id.slot.as_str(),
            raw: *raw,
            normalized: normalized.scores.get(id).copied().unwrap_or(f64::NAN),
            rank: rank.get(id).copied().unwrap_or(0),
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> CitiError {
    CitiError::Io(std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Slot};
    use crate::tasks::{generate_dataset, TaskKind};

    fn table(label: &str, vals: &[f64]) -> ImportanceTable {
        let scores = vals
            .iter()
            .enumerate()
            .map(|(i, v)| (ComponentId::new(0, Slot::ALL[i]), *v))
            .collect();
        ImportanceTable {
            label: label.into(),
            scores,
            n_samples: 1,
        }
    }

    fn tiny() -> Model<f64> {
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
    fn tool_normalization_examples() {
        let m = normalize_tool_scores(&table("t", &[3.0, 1.0])).unwrap();
        assert_eq!(m.scores.values().copied().collect::<Vec<_>>(), vec![0.75, 0.25]);
        assert!(normalize_tool_scores(&table("z", &[0.0, 0.0])).is_err());
    }

    #[test]
    fn general_aggregation_hand_case() {
        let a = table("a", &[0.5, 0.3, 0.2]);
        let b = table("b", &[0.1, 0.6, 0.3]);
        let c = aggregate_general_scores(&[a, b]).unwrap();
        let v: Vec<f64> = c.scores.values().copied().collect();
        for (x, y) in v.iter().zip([0.6, 0.9, 0.5]) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((v.iter().sum::<f64>() - 2.0).abs() < 1e-9);
        assert!(aggregate_general_scores(&[table("a", &[1.0, 2.0]), table("b", &[1.0])]).is_err());
    }

    #[test]
    fn partition_sizes_and_ties() {
        let scores: BTreeMap<ComponentId, f64> = (0..4)
            .flat_map(|l| Slot::ALL.map(|s| (ComponentId::new(l, s), 1.0)))
            .collect();
        let ns = NormalizedScores {
            kind: ScoreKind::M,
            scores,
        };
        let p = rank_and_partition(&ns);
        assert_eq!((p.high.len(), p.moderate.len(), p.low.len()), (10, 9, 9));
        let mut sorted = p.order.clone();
        sorted.sort();
        assert_eq!(p.order, sorted);
    }

    #[test]
    fn jaccard_and_null() {
        let a: BTreeSet<ComponentId> = [ComponentId::new(0, Slot::AttnQ), ComponentId::new(0, Slot::AttnK)].into();
        let b: BTreeSet<ComponentId> = [ComponentId::new(0, Slot::AttnK), ComponentId::new(0, Slot::AttnV)].into();
        assert!((jaccard_index(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard_index(&BTreeSet::new(), &BTreeSet::new()), 1.0);
        assert_eq!(expected_random_jaccard(5, 5).unwrap(), 1.0);
        // n=3, k=1: overlap with probability 1/3.
        assert!((expected_random_jaccard(3, 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_component_scores_zero_and_loss_scaling_keeps_order() {
        let mut m = tiny();
        let id = ComponentId::new(1, Slot::FfnUp);
        let pid = m.component_param(id).unwrap();
        m.params_mut().get_mut(pid).tensor.fill(0.0);
        let data = generate_dataset(TaskKind::Arith, 16, 1).unwrap();
        let t = component_importance(&m, &data, 16, 0, "arith").unwrap();
        assert_eq!(t.scores[&id], 0.0);
        assert_eq!(t.scores.len(), 14);
        assert!(t.scores.values().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn worker_count_does_not_change_scores() {
        let m = tiny();
        let data = generate_dataset(TaskKind::Copy, 150, 2).unwrap();
        let a = component_importance_parallel(&m, &data, 150, 0, "c", 1).unwrap();
        let b = component_importance_parallel(&m, &data, 150, 0, "c", 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ablation_restores_model() {
        let mut m = tiny();
        let before = m.params().clone();
        let data = generate_dataset(TaskKind::Reverse, 8, 3).unwrap();
        let d = ablate_component(&mut m, ComponentId::new(0, Slot::AttnV), &data).unwrap();
        assert!(d > 0.0);
        for ((_, p), (_, q)) in before.iter().zip(m.params().iter()) {
            assert_eq!(p.tensor, q.tensor);
        }
    }
}
