use std::collections::{BTreeMap, BTreeSet};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::component::{ComponentId, ProbeSite, SiteKind, Slot};
use crate::error::{CitiError, Result};
use crate::molora::{Adapter, AdapterConfig};
use crate::numerics::{rng_for, CeTarget, Float, Graph, ParamId, ParamStore, Span, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab_size: crate::tasks::Vocabulary::standard().len(),
            max_seq_len: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(CitiError::contract(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(CitiError::contract(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// `(d_out, d_in)` of a slot's weight matrix.
    pub fn slot_shape(&self, slot: Slot) -> (usize, usize) {
        match slot {
            Slot::AttnQ | Slot::AttnK | Slot::AttnV | Slot::AttnO => (self.d_model, self.d_model),
            Slot::FfnUp | Slot::FfnGate => (self.d_ff, self.d_model),
            Slot::FfnDown => (self.d_model, self.d_ff),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerParams {
    attn_norm: ParamId,
    ffn_norm: ParamId,
    slots: [ParamId; 7],
}

/// Ordered `ComponentId → parameter` bindings for every projection matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentRegistry {
    entries: Vec<(ComponentId, ParamId)>,
}

impl ComponentRegistry {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ComponentId> + '_ {
        self.entries.iter().map(|(c, _)| *c)
    }

    pub fn param(&self, id: ComponentId) -> Option<ParamId> {
        self.entries.iter().find(|(c, _)| *c == id).map(|(_, p)| *p)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(ComponentId, ParamId)> {
        self.entries.iter()
    }

    pub fn contains(&self, id: ComponentId) -> bool {
        self.param(id).is_some()
    }
}

/// Last-token hidden states for the requested probe sites of one sequence.
pub type HiddenCapture = BTreeMap<ProbeSite, Vec<f64>>;

/// Result of a forward pass recorded on a graph.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[rows, vocab]`, or `[n_seqs, vocab]` when only last positions were requested.
    pub logits: Var,
    pub spans: Vec<Span>,
    pub probes: BTreeMap<ProbeSite, Var>,
    /// Router outputs of every adapter that has a router, `[rows, gate_width]`.
    pub gates: Vec<(ComponentId, Var)>,
}

impl ForwardTrace {
    /// Pulls last-token rows of every probe for each sequence.
    pub fn captures<T: Float>(&self, g: &Graph<T>) -> Vec<HiddenCapture> {
        self.spans
            .iter()
            .map(|s| {
                self.probes
                    .iter()
                    .map(|(site, v)| {
                        let row = g.value(*v).row(s.start + s.len - 1);
                        (*site, row.iter().map(|x| x.as_f64()).collect())
                    })
                    .collect()
            })
            .collect()
    }
}

/// A tiny pre-norm decoder-only transformer with a gated FFN.
#[derive(Debug, Clone)]
pub struct Model<T: Float> {
    config: ModelConfig,
    params: ParamStore<T>,
    tok_emb: ParamId,
    pos_emb: ParamId,
    final_norm: ParamId,
    head: ParamId,
    layers: Vec<LayerParams>,
    registry: ComponentRegistry,
    adapters: BTreeMap<ComponentId, Adapter>,
}

/// A prompt/target pair as token ids.
#[derive(Debug, Clone, Copy)]
pub struct Pair<'a> {
    pub prompt: &'a [usize],
    pub target: &'a [usize],
}

impl<T: Float> Model<T> {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, "init");
        let mut params = ParamStore::new();
        let d = config.d_model;
        let mut gaussian = |rows: usize, cols: usize, std: f64| -> Result<Tensor<T>> {
            let dist = Normal::new(0.0, std).unwrap();
            Tensor::from_rows(rows, cols, (0..rows * cols).map(|_| T::from_f64_lossy(dist.sample(&mut rng))).collect())
        };
        let tok_emb = params.add("tok_emb", gaussian(config.vocab_size, d, 1.0)?, true)?;
        let pos_emb = params.add("pos_emb", gaussian(config.max_seq_len, d, 0.5)?, true)?;
        let resid_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let mut layers = Vec::with_capacity(config.n_layers);
        let mut entries = Vec::new();
        for l in 0..config.n_layers {
            let attn_norm = params.add(format!("layers.{l}.attn_norm"), Tensor::full(&[d], T::one()), true)?;
            let ffn_norm = params.add(format!("layers.{l}.ffn_norm"), Tensor::full(&[d], T::one()), true)?;
            let mut slots = Vec::with_capacity(7);
            for slot in Slot::ALL {
                let (out, inp) = config.slot_shape(slot);
                let mut std = 1.0 / (inp as f64).sqrt();
                if matches!(slot, Slot::AttnO | Slot::FfnDown) {
                    std *= resid_scale;
                }
                let id = params.add(format!("layers.{l}.{}", slot.as_str()), gaussian(out, inp, std)?, true)?;
                entries.push((ComponentId::new(l, slot), id));
                slots.push(id);
            }
            layers.push(LayerParams {
                attn_norm,
                ffn_norm,
                slots: slots.try_into().unwrap(),
            });
        }
        let final_norm = params.add("final_norm", Tensor::full(&[d], T::one()), true)?;
        let head = params.add("head", gaussian(config.vocab_size, d, 1.0 / (d as f64).sqrt())?, true)?;
        Ok(Self {
            config,
            params,
            tok_emb,
            pos_emb,
            final_norm,
            head,
            layers,
            registry: ComponentRegistry { entries },
            adapters: BTreeMap::new(),
        })
    }

    /// Rebuilds structure around an existing parameter store (checkpoint load).
    pub(crate) fn from_store(
        config: ModelConfig,
        params: ParamStore<T>,
        adapters: &BTreeMap<ComponentId, AdapterConfig>,
    ) -> Result<Self> {
        config.validate()?;
        let need = |name: String| {
            params
                .id(&name)
                .ok_or_else(|| CitiError::contract(format!("checkpoint lacks parameter {name}")))
        };
        let tok_emb = need("tok_emb".into())?;
        let pos_emb = need("pos_emb".into())?;
        let final_norm = need("final_norm".into())?;
        let head = need("head".into())?;
        let mut layers = Vec::new();
        let mut entries = Vec::new();
        for l in 0..config.n_layers {
            let mut slots = Vec::new();
            for slot in Slot::ALL {
                let id = need(format!("layers.{l}.{}", slot.as_str()))?;
                let (out, inp) = config.slot_shape(slot);
                if params.get(id).tensor.shape() != [out, inp] {
                    return Err(CitiError::contract(format!("layers.{l}.{} has wrong shape", slot.as_str())));
                }
                entries.push((ComponentId::new(l, slot), id));
                slots.push(id);
            }
            layers.push(LayerParams {
                attn_norm: need(format!("layers.{l}.attn_norm"))?,
                ffn_norm: need(format!("layers.{l}.ffn_norm"))?,
                slots: slots.try_into().unwrap(),
            });
        }
        let mut bound = BTreeMap::new();
        for (&cid, &cfg) in adapters {
            bound.insert(cid, Adapter::bind(&params, cid, cfg)?);
        }
        Ok(Self {
            config,
            params,
            tok_emb,
            pos_emb,
            final_norm,
            head,
            layers,
            registry: ComponentRegistry { entries },
            adapters: bound,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn registry(&self) -> &ComponentRegistry {
        &self.registry
    }

    pub fn adapters(&self) -> &BTreeMap<ComponentId, Adapter> {
        &self.adapters
    }

    pub fn adapter_configs(&self) -> BTreeMap<ComponentId, AdapterConfig> {
        self.adapters.iter().map(|(k, a)| (*k, a.config)).collect()
    }

    pub fn component_param(&self, id: ComponentId) -> Result<ParamId> {
        self.registry
            .param(id)
            .ok_or_else(|| CitiError::contract(format!("unknown component {id}")))
    }

    pub fn component_tensor(&self, id: ComponentId) -> Result<&Tensor<T>> {
        Ok(&self.params.get(self.component_param(id)?).tensor)
    }

    /// Parameters that are neither component matrices nor adapters:
    /// embeddings, norms and the output head.
    pub fn auxiliary_params(&self) -> Vec<ParamId> {
        let mut v = vec![self.tok_emb, self.pos_emb, self.final_norm, self.head];
        for l in &self.layers {
            v.push(l.attn_norm);
            v.push(l.ffn_norm);
        }
        v
    }

    /// Every backbone parameter (everything except adapters).
    pub fn backbone_params(&self) -> Vec<ParamId> {
        let mut v = self.auxiliary_params();
        v.extend(self.registry.iter().map(|(_, p)| *p));
        v.sort();
        v
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            tok_emb: self.tok_emb,
            pos_emb: self.pos_emb,
            final_norm: self.final_norm,
            head: self.head,
            layers: self.layers.clone(),
            registry: self.registry.clone(),
            adapters: self.adapters.clone(),
        }
    }

    fn check_tokens(&self, seq: &[usize]) -> Result<()> {
        if seq.is_empty() {
            return Err(CitiError::contract("empty token sequence"));
        }
        if seq.len() > self.config.max_seq_len {
            return Err(CitiError::contract(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                seq.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(t) = seq.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(CitiError::contract(format!("token id {t} outside vocabulary")));
        }
        Ok(())
    }

    fn linear(
        &self,
        g: &mut Graph<T>,
        x: Var,
        layer: usize,
        slot: Slot,
        gates: &mut Vec<(ComponentId, Var)>,
    ) -> Result<Var> {
        let w = g.param(&self.params, self.layers[layer].slots[slot as usize])?;
        let base = g.matmul_t(x, w)?;
        let id = ComponentId::new(layer, slot);
        match self.adapters.get(&id) {
            None => Ok(base),
            Some(adapter) => {
                let (out, gate) = adapter.apply(g, &self.params, x, base)?;
                if let Some(gate) = gate {
                    gates.push((id, gate));
                }
                Ok(out)
            }
        }
    }

    /// Records a forward pass over packed sequences.
    ///
    /// With `last_only`, logits are produced only for each sequence's final
    /// position (one row per sequence).
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        seqs: &[&[usize]],
        probes: &BTreeSet<ProbeSite>,
        last_only: bool,
    ) -> Result<ForwardTrace> {
        if seqs.is_empty() {
            return Err(CitiError::contract("forward over zero sequences"));
        }
        let mut spans = Vec::with_capacity(seqs.len());
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        for s in seqs {
            self.check_tokens(s)?;
            spans.push(Span {
                start: ids.len(),
                len: s.len(),
            });
            ids.extend_from_slice(s);
            positions.extend(0..s.len());
        }
        for p in probes {
            if p.layer >= self.config.n_layers {
                return Err(CitiError::contract(format!("probe layer {} out of range", p.layer)));
            }
        }
        let tok = g.param(&self.params, self.tok_emb)?;
        let pos = g.param(&self.params, self.pos_emb)?;
        let te = g.gather(tok, &ids)?;
        let pe = g.gather(pos, &positions)?;
        let mut h = g.add(te, pe)?;
        let mut captured = BTreeMap::new();
        let mut gates = Vec::new();
        for l in 0..self.config.n_layers {
            let lp = &self.layers[l];
            let gain = g.param(&self.params, lp.attn_norm)?;
            let a_in = g.rms_norm(h, gain)?;
            let site = ProbeSite::new(l, SiteKind::AttnInput);
            if probes.contains(&site) {
                captured.insert(site, a_in);
            }
            let q = self.linear(g, a_in, l, Slot::AttnQ, &mut gates)?;
            let k = self.linear(g, a_in, l, Slot::AttnK, &mut gates)?;
            let v = self.linear(g, a_in, l, Slot::AttnV, &mut gates)?;
            let att = g.causal_attention(q, k, v, &spans, self.config.n_heads)?;
            let o = self.linear(g, att, l, Slot::AttnO, &mut gates)?;
            h = g.add(h, o)?;

            let gain = g.param(&self.params, lp.ffn_norm)?;
            let f_in = g.rms_norm(h, gain)?;
            let site = ProbeSite::new(l, SiteKind::FfnInput);
            if probes.contains(&site) {
                captured.insert(site, f_in);
            }
            let up = self.linear(g, f_in, l, Slot::FfnUp, &mut gates)?;
            let gate = self.linear(g, f_in, l, Slot::FfnGate, &mut gates)?;
            let act = g.silu(gate)?;
            let mixed = g.mul(act, up)?;
            let down = self.linear(g, mixed, l, Slot::FfnDown, &mut gates)?;
            h = g.add(h, down)?;
        }
        if last_only {
            let last: Vec<usize> = spans.iter().map(|s| s.start + s.len - 1).collect();
            h = g.gather(h, &last)?;
        }
        let gain = g.param(&self.params, self.final_norm)?;
        let hn = g.rms_norm(h, gain)?;
        let head = g.param(&self.params, self.head)?;
        let logits = g.matmul_t(hn, head)?;
        Ok(ForwardTrace {
            logits,
            spans,
            probes: captured,
            gates,
        })
    }

    /// Logits for every position of one sequence plus the requested captures.
    pub fn forward(&self, tokens: &[usize], probes: &BTreeSet<ProbeSite>) -> Result<(Tensor<T>, HiddenCapture)> {
        let mut g = Graph::inference();
        let trace = self.forward_graph(&mut g, &[tokens], probes, false)?;
        let capture = trace.captures(&g).pop().unwrap_or_default();
        Ok((g.value(trace.logits).clone(), capture))
    }

    /// Last-token captures for a batch of sequences.
    pub fn capture_batch(&self, seqs: &[&[usize]], probes: &BTreeSet<ProbeSite>) -> Result<Vec<HiddenCapture>> {
        let mut g = Graph::inference();
        let trace = self.forward_graph(&mut g, seqs, probes, true)?;
        Ok(trace.captures(&g))
    }

    /// Records the mean-over-examples of per-example mean target NLL.
    /// Each sequence is `prompt ++ target[..-1]`; position `|prompt| - 1 + j`
    /// predicts `target[j]`.
    pub fn nll_graph(&self, g: &mut Graph<T>, pairs: &[Pair<'_>]) -> Result<(Var, ForwardTrace)> {
        if pairs.is_empty() {
            return Err(CitiError::contract("loss over an empty batch"));
        }
        let mut seqs = Vec::with_capacity(pairs.len());
        for p in pairs {
            if p.target.is_empty() {
                return Err(CitiError::contract("empty target"));
            }
            if p.prompt.is_empty() {
                return Err(CitiError::contract("empty prompt"));
            }
            let mut s = p.prompt.to_vec();
            s.extend_from_slice(&p.target[..p.target.len() - 1]);
            seqs.push(s);
        }
        let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
        let trace = self.forward_graph(g, &refs, &BTreeSet::new(), false)?;
        let mut targets = Vec::new();
        let n = pairs.len() as f64;
        for (p, span) in pairs.iter().zip(&trace.spans) {
            let w = 1.0 / (p.target.len() as f64 * n);
            for (j, &t) in p.target.iter().enumerate() {
                targets.push(CeTarget {
                    row: span.start + p.prompt.len() - 1 + j,
                    target: t,
                    weight: w,
                });
            }
        }
        let loss = g.cross_entropy(trace.logits, &targets)?;
        Ok((loss, trace))
    }

    /// Mean negative log-likelihood of `target` given `prompt`, per target token.
    pub fn sequence_nll(&self, prompt: &[usize], target: &[usize]) -> Result<f64> {
        self.batch_nll(&[Pair { prompt, target }])
    }

    pub fn batch_nll(&self, pairs: &[Pair<'_>]) -> Result<f64> {
        let mut g = Graph::inference();
        let (loss, _) = self.nll_graph(&mut g, pairs)?;
        Ok(g.value(loss).item().as_f64())
    }

    /// Greedy continuation of one prompt; the stop token is not included.
    pub fn greedy_decode(&self, prompt: &[usize], max_new: usize, stop: usize) -> Result<Vec<usize>> {
        Ok(self.greedy_decode_batch(&[prompt.to_vec()], max_new, stop)?.remove(0))
    }

    /// Batched greedy decoding; every prompt advances in lockstep.
    pub fn greedy_decode_batch(&self, prompts: &[Vec<usize>], max_new: usize, stop: usize) -> Result<Vec<Vec<usize>>> {
        if max_new == 0 {
            return Err(CitiError::contract("max_new must be at least 1"));
        }
        let mut seqs: Vec<Vec<usize>> = prompts.to_vec();
        let mut outs: Vec<Vec<usize>> = vec![Vec::new(); prompts.len()];
        let mut active: Vec<usize> = (0..prompts.len()).collect();
        for p in prompts {
            self.check_tokens(p)?;
        }
        for _ in 0..max_new {
            active.retain(|&i| seqs[i].len() < self.config.max_seq_len);
            if active.is_empty() {
                break;
            }
            let refs: Vec<&[usize]> = active.iter().map(|&i| seqs[i].as_slice()).collect();
            let mut g = Graph::inference();
            let trace = self.forward_graph(&mut g, &refs, &BTreeSet::new(), true)?;
            let logits = g.value(trace.logits);
            let mut still = Vec::with_capacity(active.len());
            for (r, &i) in active.iter().enumerate() {
                let next = argmax(logits.row(r));
                if next == stop {
                    continue;
                }
                seqs[i].push(next);
                outs[i].push(next);
                still.push(i);
            }
            active = still;
        }
        Ok(outs)
    }

    /// Attaches fresh adapters to `ids`. Base weights are untouched and the
    /// zero-initialized `B` matrices keep every output unchanged.
    pub fn attach_adapters(&mut self, ids: &BTreeSet<ComponentId>, config: AdapterConfig, seed: u64) -> Result<()> {
        config.validate()?;
        for id in ids {
            self.component_param(*id)?;
            if self.adapters.contains_key(id) {
                return Err(CitiError::contract(format!("component {id} already carries an adapter")));
            }
        }
        for id in ids {
            let mut rng = rng_for(seed, &format!("adapter/{id}"));
            let (d_out, d_in) = self.config.slot_shape(id.slot);
            let adapter = Adapter::create(&mut self.params, *id, config, d_in, d_out, &mut rng)?;
            self.adapters.insert(*id, adapter);
        }
        Ok(())
    }

    /// Sets every parameter's trainable flag from `trainable`.
    pub fn set_trainable(&mut self, trainable: &BTreeSet<ParamId>) {
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            self.params.get_mut(id).trainable = trainable.contains(&id);
        }
    }

    pub fn trainable_set(&self) -> BTreeSet<ParamId> {
        self.params.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }
}

pub(crate) fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Copy of `target` with the listed components taken from `source`.
#[must_use = "the swapped model is returned, not written into target"]
pub fn swap_component_weights<T: Float>(
    target: &Model<T>,
    source: &Model<T>,
    ids: &BTreeSet<ComponentId>,
) -> Result<Model<T>> {
    if target.config != source.config {
        return Err(CitiError::contract("swap between models of different configuration"));
    }
    let mut out = target.clone();
    for id in ids {
        let dst = target.component_param(*id)?;
        let src = source.component_param(*id)?;
        out.params.get_mut(dst).tensor = source.params.get(src).tensor.clone();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 24,
            vocab_size: 11,
            max_seq_len: 12,
            seed: 5,
        }
    }

    #[test]
    fn registry_covers_seven_slots_per_layer() {
        let m = Model::<f32>::build(ModelConfig::default()).unwrap();
        assert_eq!(m.registry().len(), 28);
        let params: BTreeSet<_> = m.registry().iter().map(|(_, p)| *p).collect();
        assert_eq!(params.len(), 28);
        for (_, p) in m.registry().iter() {
            assert!(m.params().get(*p).name.starts_with("layers."));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = small();
        c.d_model = 63;
        c.n_heads = 4;
        assert!(Model::<f32>::build(c).is_err());
        let mut c = small();
        c.n_layers = 0;
        assert!(Model::<f32>::build(c).is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::<f32>::build(small()).unwrap();
        let b = Model::<f32>::build(small()).unwrap();
        for ((_, p), (_, q)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(p.tensor, q.tensor);
        }
    }

    #[test]
    fn logits_are_prefix_stable() {
        let m = Model::<f64>::build(small()).unwrap();
        let seq = [1, 4, 2, 9, 3];
        let (full, _) = m.forward(&seq, &BTreeSet::new()).unwrap();
        let (prefix, _) = m.forward(&seq[..3], &BTreeSet::new()).unwrap();
        assert_eq!(&full.data()[..3 * 11], prefix.data());
    }

    #[test]
    fn packed_batch_matches_single_forward() {
        let m = Model::<f64>::build(small()).unwrap();
        let a = [1usize, 2, 3];
        let b = [4usize, 5, 6, 7];
        let mut g = Graph::inference();
        let t = m.forward_graph(&mut g, &[&a, &b], &BTreeSet::new(), false).unwrap();
        let (la, _) = m.forward(&a, &BTreeSet::new()).unwrap();
        let (lb, _) = m.forward(&b, &BTreeSet::new()).unwrap();
        let packed = g.value(t.logits).data();
        let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-12);
        assert!(close(&packed[..33], la.data()));
        assert!(close(&packed[33..], lb.data()));
    }

    #[test]
    fn no_probes_no_capture_and_over_length_rejected() {
        let m = Model::<f32>::build(small()).unwrap();
        let (_, cap) = m.forward(&[1, 2], &BTreeSet::new()).unwrap();
        assert!(cap.is_empty());
        assert!(m.forward(&[1; 13], &BTreeSet::new()).is_err());
        assert!(m.forward(&[11], &BTreeSet::new()).is_err());
    }

    #[test]
    fn untrained_nll_is_near_log_vocab() {
        let mut m = Model::<f64>::build(small()).unwrap();
        // Zeroing the head makes the output distribution exactly uniform.
        let head = m.head;
        m.params_mut().get_mut(head).tensor.fill(0.0);
        let nll = m.sequence_nll(&[1, 2], &[3, 4, 5]).unwrap();
        assert!((nll - (11f64).ln()).abs() < 1e-12);
        assert!(m.sequence_nll(&[1], &[]).is_err());
    }

    #[test]
    fn concatenated_targets_give_length_weighted_mean() {
        let m = Model::<f64>::build(small()).unwrap();
        // Single example loss is a mean over its target tokens; a batch of two
        // examples averages the two per-example means.
        let l1 = m.sequence_nll(&[1, 2], &[3]).unwrap();
        let l2 = m.sequence_nll(&[1, 2, 3], &[4, 5]).unwrap();
        let joint = m.sequence_nll(&[1, 2], &[3, 4, 5]).unwrap();
        assert!((joint - (l1 + 2.0 * l2) / 3.0).abs() < 1e-12);
        let batch = m
            .batch_nll(&[
                Pair { prompt: &[1, 2], target: &[3] },
                Pair { prompt: &[1, 2, 3], target: &[4, 5] },
            ])
            .unwrap();
        assert!((batch - (l1 + l2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn decode_is_deterministic_and_respects_stop() {
        let m = Model::<f32>::build(small()).unwrap();
        let a = m.greedy_decode(&[1, 2], 5, 0).unwrap();
        let b = m.greedy_decode(&[1, 2], 5, 0).unwrap();
        assert_eq!(a, b);
        // Whatever the first argmax is, using it as the stop token yields nothing.
        let (logits, _) = m.forward(&[1, 2], &BTreeSet::new()).unwrap();
        let first = argmax(logits.row(1));
        assert!(m.greedy_decode(&[1, 2], 5, first).unwrap().is_empty());
        assert!(m.greedy_decode(&[1, 2], 0, first).is_err());
    }

    #[test]
    fn swap_locality_and_endpoints() {
        let a = Model::<f32>::build(small()).unwrap();
        let mut cb = small();
        cb.seed = 99;
        let mut b = Model::<f32>::build(cb).unwrap();
        b.config.seed = a.config.seed;
        let one: BTreeSet<_> = [ComponentId::new(0, Slot::FfnUp)].into();
        let s = swap_component_weights(&a, &b, &one).unwrap();
        for ((_, p), ((_, q), (_, r))) in s.params().iter().zip(a.params().iter().zip(b.params().iter())) {
            if p.name == "layers.0.ffn_up" {
                assert_eq!(p.tensor, r.tensor);
            } else {
                assert_eq!(p.tensor, q.tensor);
            }
        }
        let none = swap_component_weights(&a, &b, &BTreeSet::new()).unwrap();
        assert_eq!(none.forward(&[1, 2], &BTreeSet::new()).unwrap().0, a.forward(&[1, 2], &BTreeSet::new()).unwrap().0);
        let mut c2 = small();
        c2.n_heads = 4;
        let c = Model::<f32>::build(c2).unwrap();
        assert!(swap_component_weights(&a, &c, &one).is_err());
        let bogus: BTreeSet<_> = [ComponentId::new(7, Slot::FfnUp)].into();
        assert!(swap_component_weights(&a, &b, &bogus).is_err());
    }

    #[test]
    fn ffn_probe_matches_manual_recomputation() {
        let m = Model::<f64>::build(small()).unwrap();
        let seq = [3usize, 1, 4, 1];
        let probes: BTreeSet<_> = [ProbeSite::new(0, SiteKind::FfnInput)].into();
        let (_, cap) = m.forward(&seq, &probes).unwrap();

        // Independent recomputation of layer 0 with plain tensor arithmetic.
        let p = m.params();
        let d = 16;
        let n = seq.len();
        let emb = &p.by_name("tok_emb").unwrap().tensor;
        let pos = &p.by_name("pos_emb").unwrap().tensor;
        let mut x = vec![vec![0.0; d]; n];
        for t in 0..n {
            for c in 0..d {
                x[t][c] = emb.row(seq[t])[c] + pos.row(t)[c];
            }
        }
        let rms = |v: &[f64], gain: &[f64]| -> Vec<f64> {
            let ms = v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64;
            let iv = 1.0 / (ms + 1e-6).sqrt();
            v.iter().zip(gain).map(|(a, g)| a * iv * g).collect()
        };
        let mv = |w: &Tensor<f64>, v: &[f64]| -> Vec<f64> {
            (0..w.dims2().0).map(|r| w.row(r).iter().zip(v).map(|(a, b)| a * b).sum()).collect()
        };
        let g_attn = p.by_name("layers.0.attn_norm").unwrap().tensor.data().to_vec();
        let a_in: Vec<Vec<f64>> = x.iter().map(|r| rms(r, &g_attn)).collect();
        let wq = &p.by_name("layers.0.attn_q").unwrap().tensor;
        let wk = &p.by_name("layers.0.attn_k").unwrap().tensor;
        let wv = &p.by_name("layers.0.attn_v").unwrap().tensor;
        let wo = &p.by_name("layers.0.attn_o").unwrap().tensor;
        let q: Vec<_> = a_in.iter().map(|r| mv(wq, r)).collect();
        let k: Vec<_> = a_in.iter().map(|r| mv(wk, r)).collect();
        let v: Vec<_> = a_in.iter().map(|r| mv(wv, r)).collect();
        let last = n - 1;
        let mut att = vec![0.0; d];
        for h in 0..2 {
            let r = h * 8..(h + 1) * 8;
            let scores: Vec<f64> = (0..n)
                .map(|j| q[last][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / 8f64.sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..n {
                for c in r.clone() {
                    att[c] += e[j] / z * v[j][c];
                }
            }
        }
        let o = mv(wo, &att);
        let h: Vec<f64> = x[last].iter().zip(&o).map(|(a, b)| a + b).collect();
        let g_ffn = p.by_name("layers.0.ffn_norm").unwrap().tensor.data().to_vec();
        let expected = rms(&h, &g_ffn);
        let got = &cap[&ProbeSite::new(0, SiteKind::FfnInput)];
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}
