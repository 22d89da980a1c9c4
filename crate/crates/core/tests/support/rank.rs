//! Rank-correlation oracle and the importance-vs-ablation measurement.

use citi_core::importance::{ablate_component, component_importance};
use citi_core::model::{Model, ModelConfig};
use citi_core::tasks::{generate_dataset, TaskKind, Vocabulary};

/// Ranks with ties averaged, 1-based.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

/// Spearman correlation between first-order scores and zeroing deltas on a
/// freshly initialized 2-layer model, over 64 TOOLCALL examples.
pub fn importance_ablation_rho() -> f64 {
    let cfg = ModelConfig {
        n_layers: 2,
        vocab_size: Vocabulary::standard().len(),
        seed: 3,
        ..ModelConfig::default()
    };
    let mut model = Model::<f32>::build(cfg).unwrap();
    let data = generate_dataset(TaskKind::Toolcall, 64, 11).unwrap();
    let table = component_importance(&model, &data, data.len(), 0, "TOOLCALL").unwrap();
    let mut imp = Vec::new();
    let mut abl = Vec::new();
    for (id, s) in &table.scores {
        imp.push(*s);
        abl.push(ablate_component(&mut model, *id, &data).unwrap());
    }
    spearman(&imp, &abl)
}
