//! Mixture-of-LoRA adapters with a suppression router.
//!
//! An adapter wraps one linear component `W₀`. Its router produces `N + 1`
//! probabilities per token; entry 0 is the suppression neuron and only ever
//! absorbs probability mass, entries `1..=N` weight the experts:
//!
//! ```text
//! h = W₀x + Σ_{i=0}^{N-1} G(x)[i+1] · (alpha / r) · B_i A_i x
//! ```
//!
//! The routing loss is the variance-over-mean of `Z = I ⊙ G`, where the
//! importance matrix `I` pushes tool tokens towards the experts and other
//! tokens towards the suppression neuron.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CitiError, Result};
use crate::model::ComponentId;
use crate::numerics::{Float, Graph, ParamId, ParamStore, Rng, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    /// `N + 1` outputs, entry 0 suppresses the experts.
    Suppression,
    /// `N` outputs, a conventional mixture gate without the extra neuron.
    Plain,
    /// No router: a single always-on expert (plain LoRA).
    Absent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub n_experts: usize,
    pub rank: usize,
    pub alpha: f64,
    /// Imbalance of the importance matrix, in `[0, 1]`.
    pub delta: f64,
    pub router: RouterKind,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            n_experts: 4,
            rank: 8,
            alpha: 2.0,
            delta: 0.95,
            router: RouterKind::Suppression,
        }
    }
}

impl AdapterConfig {
    pub fn plain_lora(rank: usize, alpha: f64) -> Self {
        Self {
            n_experts: 1,
            rank,
            alpha,
            delta: 0.0,
            router: RouterKind::Absent,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Number of router outputs (0 without a router).
    pub fn gate_width(&self) -> usize {
        match self.router {
            RouterKind::Suppression => self.n_experts + 1,
            RouterKind::Plain => self.n_experts,
            RouterKind::Absent => 0,
        }
    }

    fn first_expert_column(&self) -> usize {
        match self.router {
            RouterKind::Suppression => 1,
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 || self.rank == 0 {
            return Err(CitiError::contract("adapter needs at least one expert of positive rank"));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(CitiError::contract(format!("delta {} outside [0, 1]", self.delta)));
        }
        if self.router == RouterKind::Absent && self.n_experts != 1 {
            return Err(CitiError::contract("an adapter without router carries exactly one expert"));
        }
        Ok(())
    }

    /// Parameter count of one adapter on a `d_out × d_in` component.
    pub fn param_count(&self, d_in: usize, d_out: usize) -> usize {
        self.n_experts * self.rank * (d_in + d_out) + self.gate_width() * d_in
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Expert {
    /// `r × d_in`
    pub a: ParamId,
    /// `d_out × r`
    pub b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub component: ComponentId,
    pub config: AdapterConfig,
    pub d_in: usize,
    pub d_out: usize,
    pub experts: Vec<Expert>,
    /// `gate_width × d_in`
    pub router: Option<ParamId>,
}

pub(crate) fn adapter_prefix(id: ComponentId) -> String {
    format!("adapters.layer{}.{}", id.layer, id.slot.as_str())
}

impl Adapter {
    /// Registers fresh adapter parameters in `store`: Gaussian `A`, zero `B`,
    /// small Gaussian router.
    pub fn create<T: Float>(
        store: &mut ParamStore<T>,
        component: ComponentId,
        config: AdapterConfig,
        d_in: usize,
        d_out: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        if config.rank > d_in.min(d_out) {
            return Err(CitiError::contract(format!(
                "rank {} exceeds component extent {}x{}",
                config.rank, d_out, d_in
            )));
        }
        let prefix = adapter_prefix(component);
        let a_dist = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).unwrap();
        let mut experts = Vec::with_capacity(config.n_experts);
        for i in 0..config.n_experts {
            let a: Vec<T> = (0..config.rank * d_in)
                .map(|_| T::from_f64_lossy(a_dist.sample(rng)))
                .collect();
            let a = store.add(format!("{prefix}.expert{i}.a"), Tensor::from_rows(config.rank, d_in, a)?, true)?;
            let b = store.add(
                format!("{prefix}.expert{i}.b"),
                Tensor::zeros(&[d_out, config.rank]),
                true,
            )?;
            experts.push(Expert { a, b });
        }
        let router = match config.gate_width() {
            0 => None,
            w => {
                let r_dist = Normal::new(0.0, 0.02).unwrap();
                let data: Vec<T> = (0..w * d_in)
                    .map(|_| T::from_f64_lossy(r_dist.sample(rng)))
                    .collect();
                Some(store.add(format!("{prefix}.router"), Tensor::from_rows(w, d_in, data)?, true)?)
            }
        };
        Ok(Self {
            component,
            config,
            d_in,
            d_out,
            experts,
            router,
        })
    }

    /// Rebinds an adapter whose parameters already live in `store`.
    pub fn bind<T: Float>(store: &ParamStore<T>, component: ComponentId, config: AdapterConfig) -> Result<Self> {
        let prefix = adapter_prefix(component);
        let lookup = |name: String| {
            store
                .id(&name)
                .ok_or_else(|| CitiError::contract(format!("checkpoint lacks {name}")))
        };
        let mut experts = Vec::new();
        for i in 0..config.n_experts {
            experts.push(Expert {
                a: lookup(format!("{prefix}.expert{i}.a"))?,
                b: lookup(format!("{prefix}.expert{i}.b"))?,
            });
        }
        let router = match config.gate_width() {
            0 => None,
            _ => Some(lookup(format!("{prefix}.router"))?),
        };
        let (d_out, _) = store.get(experts[0].b).tensor.dims2();
        let (_, d_in) = store.get(experts[0].a).tensor.dims2();
        Ok(Self {
            component,
            config,
            d_in,
            d_out,
            experts,
            router,
        })
    }

    pub fn expert_params(&self) -> Vec<ParamId> {
        self.experts.iter().flat_map(|e| [e.a, e.b]).collect()
    }

    pub fn router_params(&self) -> Vec<ParamId> {
        self.router.into_iter().collect()
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        let mut v = self.expert_params();
        v.extend(self.router_params());
        v
    }

    /// Router probabilities for every row of `x` (`[rows, gate_width]`).
    pub fn gate<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Option<Var>> {
        match self.router {
            None => Ok(None),
            Some(w) => {
                let w = g.param(store, w)?;
                let logits = g.matmul_t(x, w)?;
                Ok(Some(g.softmax(logits)?))
            }
        }
    }

    /// `base + Σ gate-weighted, scaled expert outputs`. Returns the output
    /// and the gate matrix when the adapter has a router.
    pub fn apply<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        base: Var,
    ) -> Result<(Var, Option<Var>)> {
        let gate = self.gate(g, store, x)?;
        let scale = T::from_f64_lossy(self.config.scale());
        let first = self.config.first_expert_column();
        let mut out = base;
        for (i, e) in self.experts.iter().enumerate() {
            let a = g.param(store, e.a)?;
            let b = g.param(store, e.b)?;
            let ax = g.matmul_t(x, a)?;
            let bax = g.matmul_t(ax, b)?;
            let mut y = g.scale(bax, scale)?;
            if let Some(gate) = gate {
                y = g.scale_by_column(y, gate, first + i)?;
            }
            out = g.add(out, y)?;
        }
        Ok((out, gate))
    }
}

/// Softmax router output for a single input vector.
pub fn router_gate<T: Float>(router: &Tensor<T>, x: &[T]) -> Result<Vec<T>> {
    let mut g = Graph::inference();
    let w = g.constant(router.clone())?;
    let xv = g.constant(Tensor::from_rows(1, x.len(), x.to_vec())?)?;
    let logits = g.matmul_t(xv, w)?;
    let p = g.softmax(logits)?;
    Ok(g.value(p).data().to_vec())
}

/// Dense single-vector MoLoRA forward: `W₀x + Σ G[i+1]·scale·B_i A_i x`.
pub fn molora_forward<T: Float>(
    base: &Tensor<T>,
    experts: &[(Tensor<T>, Tensor<T>)],
    router: &Tensor<T>,
    scale: f64,
    x: &[T],
) -> Result<Vec<T>> {
    let (router_rows, _) = router.dims2();
    if router_rows != experts.len() + 1 {
        return Err(CitiError::Shape {
            op: "molora_forward",
            lhs: router.shape().to_vec(),
            rhs: vec![experts.len() + 1],
        });
    }
    let mut g = Graph::inference();
    let xv = g.constant(Tensor::from_rows(1, x.len(), x.to_vec())?)?;
    let w0 = g.constant(base.clone())?;
    let mut out = g.matmul_t(xv, w0)?;
    let w = g.constant(router.clone())?;
    let logits = g.matmul_t(xv, w)?;
    let gate = g.softmax(logits)?;
    for (i, (a, b)) in experts.iter().enumerate() {
        let a = g.constant(a.clone())?;
        let b = g.constant(b.clone())?;
        let ax = g.matmul_t(xv, a)?;
        let bax = g.matmul_t(ax, b)?;
        let y = g.scale(bax, T::from_f64_lossy(scale))?;
        let y = g.scale_by_column(y, gate, i + 1)?;
        out = g.add(out, y)?;
    }
    Ok(g.value(out).data().to_vec())
}

/// Per-token importance rows: `[1+δ, 1−δ, …]` for tool tokens and
/// `[1−δ, 1+δ, …]` otherwise; each row has `n_experts + 1` entries.
pub fn importance_matrix<T: Float>(tool_flags: &[bool], n_experts: usize, delta: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(CitiError::contract(format!("delta {delta} outside [0, 1]")));
    }
    if tool_flags.is_empty() {
        return Err(CitiError::contract("importance matrix needs at least one token"));
    }
    let hi = T::from_f64_lossy(1.0 + delta);
    let lo = T::from_f64_lossy(1.0 - delta);
    let width = n_experts + 1;
    let mut data = Vec::with_capacity(tool_flags.len() * width);
    for &tool in tool_flags {
        let (first, rest) = if tool { (hi, lo) } else { (lo, hi) };
        data.push(first);
        data.extend(std::iter::repeat_n(rest, n_experts));
    }
    Tensor::from_rows(tool_flags.len(), width, data)
}

/// `σ²(Z) / μ(Z)` for `Z = I ⊙ G`, on the tape.
pub fn routing_loss_graph<T: Float>(g: &mut Graph<T>, gates: Var, importance: Tensor<T>) -> Result<Var> {
    let z = g.mul_const(gates, importance)?;
    g.variance_over_mean(z)
}

/// `σ²(Z) / μ(Z)` for `Z = I ⊙ G`, with population variance over all entries.
pub fn routing_loss<T: Float>(gates: &Tensor<T>, importance: &Tensor<T>) -> Result<f64> {
    if gates.shape() != importance.shape() {
        return Err(CitiError::Shape {
            op: "routing_loss",
            lhs: gates.shape().to_vec(),
            rhs: importance.shape().to_vec(),
        });
    }
    let mut g = Graph::inference();
    let gv = g.constant(gates.clone())?;
    let l = routing_loss_graph(&mut g, gv, importance.clone())?;
    Ok(g.value(l).item().as_f64())
}

/// Gates and tool flags gathered for one adapter over one batch.
#[derive(Debug, Clone)]
pub struct RoutingBatchStats {
    pub gates: Tensor<f64>,
    pub tool_flags: Vec<bool>,
    pub z: Tensor<f64>,
    pub loss: f64,
}

impl RoutingBatchStats {
    pub fn compute(gates: Tensor<f64>, tool_flags: Vec<bool>, delta: f64) -> Result<Self> {
        let n = gates.dims2().1 - 1;
        let imp = importance_matrix::<f64>(&tool_flags, n, delta)?;
        let loss = routing_loss(&gates, &imp)?;
        let z = Tensor::new(
            gates.shape().to_vec(),
            gates.data().iter().zip(imp.data()).map(|(a, b)| a * b).collect(),
        )?;
        Ok(Self {
            gates,
            tool_flags,
            z,
            loss,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, rng_for};

    #[test]
    fn zero_router_gives_uniform_gate() {
        let w = Tensor::<f64>::zeros(&[5, 3]);
        let p = router_gate(&w, &[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(p, vec![0.2; 5]);
    }

    #[test]
    fn gate_is_shift_invariant() {
        // Adding a constant to every logit: an extra input coordinate fixed at
        // 1 whose router column is constant.
        let mut w = Tensor::<f64>::from_rows(3, 3, vec![0.1, -0.4, 0.0, 0.7, 0.2, 0.0, -0.3, 0.5, 0.0]).unwrap();
        let x = [0.9, -1.1, 1.0];
        let p0 = router_gate(&w, &x).unwrap();
        for r in 0..3 {
            w.data_mut()[r * 3 + 2] = 4.0;
        }
        let p1 = router_gate(&w, &x).unwrap();
        for (a, b) in p0.iter().zip(&p1) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p1.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fresh_expert_is_transparent_and_suppression_silences() {
        let w0 = Tensor::<f64>::from_rows(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let a = Tensor::from_rows(1, 3, vec![0.5, -0.5, 1.0]).unwrap();
        let b = Tensor::from_rows(2, 1, vec![2.0, -1.0]).unwrap();
        let x = [1.0, 0.0, 2.0];
        let direct = w0.matmul(&Tensor::from_rows(3, 1, x.to_vec()).unwrap()).unwrap();

        let zero_b = Tensor::zeros(&[2, 1]);
        let out = molora_forward(&w0, &[(a.clone(), zero_b)], &Tensor::zeros(&[2, 3]), 1.0, &x).unwrap();
        assert_eq!(out, direct.data());

        // Router forced onto the suppression neuron.
        let router = Tensor::from_rows(2, 3, vec![1000.0, 0., 0., 0., 0., 0.]).unwrap();
        let out = molora_forward(&w0, &[(a.clone(), b.clone())], &router, 1.0, &x).unwrap();
        assert_eq!(out, direct.data());

        // Router forced onto the single expert: W₀x + B₀A₀x.
        let router = Tensor::from_rows(2, 3, vec![0., 0., 0., 1000.0, 0., 0.]).unwrap();
        let out = molora_forward(&w0, &[(a.clone(), b.clone())], &router, 1.0, &x).unwrap();
        let ax: f64 = a.data().iter().zip(&x).map(|(p, q)| p * q).sum();
        let expected: Vec<f64> = direct.data().iter().zip(b.data()).map(|(d, bb)| d + bb * ax).collect();
        for (o, e) in out.iter().zip(&expected) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn importance_rows() {
        let i = importance_matrix::<f64>(&[true, false], 2, 1.0).unwrap();
        assert_eq!(i.row(0), &[2.0, 0.0, 0.0]);
        assert_eq!(i.row(1), &[0.0, 2.0, 2.0]);
        let ones = importance_matrix::<f64>(&[true, false, true], 4, 0.0).unwrap();
        assert!(ones.data().iter().all(|&v| v == 1.0));
        assert!(importance_matrix::<f64>(&[true], 2, 1.5).is_err());
    }

    #[test]
    fn routing_loss_hand_values() {
        let g = Tensor::<f64>::full(&[4, 5], 0.2);
        let i = importance_matrix::<f64>(&[true, false, true, false], 4, 0.0).unwrap();
        assert_eq!(routing_loss(&g, &i).unwrap(), 0.0);

        let z = Tensor::<f64>::from_rows(1, 2, vec![0.0, 2.0]).unwrap();
        let ones = Tensor::full(&[1, 2], 1.0);
        assert_eq!(routing_loss(&z, &ones).unwrap(), 1.0);

        let zero = Tensor::<f64>::zeros(&[1, 2]);
        assert!(routing_loss(&zero, &ones).is_err());
    }

    #[test]
    fn routing_loss_gradient_matches_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_for(3, "test");
        let d = 6;
        let w: Vec<f64> = (0..5 * d).map(|_| Normal::new(0.0, 0.5).unwrap().sample(&mut rng)).collect();
        let wid = store.add("router", Tensor::from_rows(5, d, w).unwrap(), true).unwrap();
        let x: Vec<f64> = (0..7 * d).map(|_| Normal::new(0.0, 1.0).unwrap().sample(&mut rng)).collect();
        let x = Tensor::from_rows(7, d, x).unwrap();
        let flags = [true, false, false, true, true, false, true];
        let err = finite_diff_check(
            &mut store,
            |g, s| {
                let xv = g.constant(x.clone())?;
                let w = g.param(s, wid)?;
                let logits = g.matmul_t(xv, w)?;
                let gate = g.softmax(logits)?;
                routing_loss_graph(g, gate, importance_matrix(&flags, 4, 0.95)?)
            },
            1e-5,
            usize::MAX,
            0,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn delta_zero_is_class_blind() {
        let g = Tensor::<f64>::from_rows(3, 3, vec![0.5, 0.3, 0.2, 0.1, 0.1, 0.8, 0.3, 0.3, 0.4]).unwrap();
        let a = routing_loss(&g, &importance_matrix(&[true, false, false], 2, 0.0).unwrap()).unwrap();
        let b = routing_loss(&g, &importance_matrix(&[false, true, true], 2, 0.0).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parameter_count_formula() {
        let c = AdapterConfig::default();
        assert_eq!(c.param_count(64, 128), 4 * 8 * (64 + 128) + 5 * 64);
        assert_eq!(AdapterConfig::plain_lora(16, 16.0).param_count(64, 64), 16 * 128);
    }
}
