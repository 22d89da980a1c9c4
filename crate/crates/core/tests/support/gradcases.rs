//! Finite-difference checks of every graph primitive and of the training
//! loss, all in f64.

use std::collections::BTreeSet;

use rand::Rng;

use citi_core::model::{ComponentId, Model, ModelConfig, Slot};
use citi_core::molora::{importance_matrix, routing_loss_graph, AdapterConfig};
use citi_core::numerics::{finite_diff_check, rng_for, CeTarget, Graph, ParamId, ParamStore, Span, Tensor, Var};
use citi_core::tasks::{generate_dataset, TaskKind, Vocabulary};
use citi_core::trainer::total_loss_graph;
use citi_core::Result;

const EPS: f64 = 1e-5;

fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = rng_for(seed, "gradcase");
    Tensor::from_rows(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces a matrix to a scalar through fixed random weights, so every
/// output entry contributes a distinct gradient.
fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    let (r, c) = if shape.len() == 2 { (shape[0], shape[1]) } else { (1, shape.iter().product()) };
    let w = random(r, c, seed).reshape(shape)?;
    let p = g.mul_const(v, w)?;
    g.sum(p)
}

fn check<F>(store: &mut ParamStore<f64>, expr: F) -> f64
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    finite_diff_check(store, expr, EPS, 400, 0).unwrap()
}

fn store_with(shapes: &[(usize, usize)]) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut s = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| s.add(format!("p{i}"), random(r, c, 100 + i as u64), true).unwrap())
        .collect();
    (s, ids)
}

fn binary(op: fn(&mut Graph<f64>, Var, Var) -> Result<Var>, a: (usize, usize), b: (usize, usize)) -> f64 {
    let (mut s, ids) = store_with(&[a, b]);
    check(&mut s, |g, s| {
        let x = g.param(s, ids[0])?;
        let y = g.param(s, ids[1])?;
        let o = op(g, x, y)?;
        project(g, o, 1)
    })
}

fn unary(op: fn(&mut Graph<f64>, Var) -> Result<Var>) -> f64 {
    let (mut s, ids) = store_with(&[(3, 5)]);
    check(&mut s, |g, s| {
        let x = g.param(s, ids[0])?;
        let o = op(g, x)?;
        project(g, o, 2)
    })
}

fn total_loss_case() -> f64 {
    let cfg = ModelConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: Vocabulary::standard().len(),
        max_seq_len: 64,
        seed: 4,
    };
    let mut model = Model::<f64>::build(cfg).unwrap();
    let ids: BTreeSet<ComponentId> = [Slot::AttnV, Slot::FfnDown]
        .into_iter()
        .map(|slot| ComponentId { layer: 0, slot })
        .collect();
    let adapter = AdapterConfig {
        rank: 2,
        ..AdapterConfig::default()
    };
    model.attach_adapters(&ids, adapter, 4).unwrap();
    let mut rng = rng_for(5, "perturb");
    for id in model.params().ids().collect::<Vec<_>>() {
        for v in model.params_mut().get_mut(id).tensor.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let mut batch = generate_dataset(TaskKind::Toolcall, 2, 6).unwrap();
    batch.extend(generate_dataset(TaskKind::Arith, 2, 6).unwrap());
    let mut store = model.params().clone();
    check(&mut store, |g, s| {
        let mut m = model.clone();
        *m.params_mut() = s.clone();
        let refs: Vec<_> = batch.iter().collect();
        Ok(total_loss_graph(g, &m, &refs, 0.3, 0.95)?.total)
    })
}

/// `(case, worst relative error)` for each primitive and the total loss.
pub fn gradcheck_cases() -> Vec<(&'static str, f64)> {
    let mut out = vec![
        ("matmul", binary(|g, a, b| g.matmul(a, b), (3, 4), (4, 5))),
        ("matmul_t", binary(|g, a, b| g.matmul_t(a, b), (3, 4), (5, 4))),
        ("add", binary(|g, a, b| g.add(a, b), (3, 4), (3, 4))),
        ("sub", binary(|g, a, b| g.sub(a, b), (3, 4), (3, 4))),
        ("mul", binary(|g, a, b| g.mul(a, b), (3, 4), (3, 4))),
        ("scale", unary(|g, a| g.scale(a, 0.7))),
        ("square", unary(|g, a| g.square(a))),
        ("silu", unary(|g, a| g.silu(a))),
        ("softmax", unary(|g, a| g.softmax(a))),
        ("mean", unary(|g, a| g.mean(a))),
        ("sum", unary(|g, a| g.sum(a))),
        (
            "variance_over_mean",
            unary(|g, a| {
                let p = g.softmax(a)?;
                g.variance_over_mean(p)
            }),
        ),
        ("gather", {
            let (mut s, ids) = store_with(&[(6, 4)]);
            check(&mut s, |g, s| {
                let t = g.param(s, ids[0])?;
                let o = g.gather(t, &[2, 0, 2, 5])?;
                project(g, o, 3)
            })
        }),
        ("rms_norm", {
            let (mut s, ids) = store_with(&[(3, 5), (1, 5)]);
            check(&mut s, |g, s| {
                let x = g.param(s, ids[0])?;
                let w = g.param(s, ids[1])?;
                let o = g.rms_norm(x, w)?;
                project(g, o, 4)
            })
        }),
        ("causal_attention", {
            let (mut s, ids) = store_with(&[(5, 4), (5, 4), (5, 4)]);
            let spans = [Span { start: 0, len: 3 }, Span { start: 3, len: 2 }];
            check(&mut s, |g, s| {
                let q = g.param(s, ids[0])?;
                let k = g.param(s, ids[1])?;
                let v = g.param(s, ids[2])?;
                let o = g.causal_attention(q, k, v, &spans, 2)?;
                project(g, o, 5)
            })
        }),
        ("cross_entropy", {
            let (mut s, ids) = store_with(&[(4, 6)]);
            let targets: Vec<CeTarget> = [(0, 1), (1, 5), (3, 0)]
                .iter()
                .map(|&(row, target)| CeTarget { row, target, weight: 1.0 })
                .collect();
            check(&mut s, |g, s| {
                let x = g.param(s, ids[0])?;
                g.cross_entropy(x, &targets)
            })
        }),
        ("scale_by_column", {
            let (mut s, ids) = store_with(&[(4, 3), (4, 5)]);
            check(&mut s, |g, s| {
                let x = g.param(s, ids[0])?;
                let gates = g.param(s, ids[1])?;
                let o = g.scale_by_column(x, gates, 2)?;
                project(g, o, 6)
            })
        }),
        ("routing_loss", {
            let (mut s, ids) = store_with(&[(6, 5)]);
            let flags = [true, false, true, true, false, false];
            check(&mut s, |g, s| {
                let x = g.param(s, ids[0])?;
                let p = g.softmax(x)?;
                routing_loss_graph(g, p, importance_matrix(&flags, 4, 0.95)?)
            })
        }),
    ];
    out.push(("total_loss", total_loss_case()));
    out
}
