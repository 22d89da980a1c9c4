//! Staged training: router pre-training (RP), MoLoRA improvement (MI) and
//! unimportant-component optimization (UCO), plus the full fine-tuning and
//! plain LoRA baselines.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CitiError, Result};
use crate::importance::{select_by_rank, NormalizedScores, SelectMode};
use crate::model::{ComponentId, Model, Pair};
use crate::molora::{importance_matrix, routing_loss_graph, AdapterConfig, RouterKind};
use crate::numerics::{derive_seed, rng_for, Adam, Float, Graph, ParamId, Var};
use crate::tasks::{generate_dataset, SyntheticExample, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Stage {
    Rp,
    Mi,
    Uco,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Rp => "RP",
            Stage::Mi => "MI",
            Stage::Uco => "UCO",
        })
    }
}

/// Trainable flag for every parameter name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub flags: BTreeMap<String, bool>,
}

impl FreezeMask {
    pub fn from_ids<T: Float>(model: &Model<T>, trainable: &BTreeSet<ParamId>) -> Self {
        Self {
            flags: model
                .params()
                .iter()
                .map(|(id, p)| (p.name.clone(), trainable.contains(&id)))
                .collect(),
        }
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.flags.iter().filter(|(_, t)| **t).map(|(n, _)| n.as_str())
    }

    /// Resolves the mask against `model`; every parameter must be covered.
    pub fn resolve<T: Float>(&self, model: &Model<T>) -> Result<BTreeSet<ParamId>> {
        if self.flags.len() != model.params().len() {
            return Err(CitiError::contract(format!(
                "freeze mask covers {} parameters, model has {}",
                self.flags.len(),
                model.params().len()
            )));
        }
        let mut set = BTreeSet::new();
        for (id, p) in model.params().iter() {
            match self.flags.get(&p.name) {
                None => return Err(CitiError::contract(format!("freeze mask lacks {}", p.name))),
                Some(true) => {
                    set.insert(id);
                }
                Some(false) => {}
            }
        }
        Ok(set)
    }

    pub fn trainable_count<T: Float>(&self, model: &Model<T>) -> usize {
        model
            .params()
            .iter()
            .filter(|(_, p)| self.flags.get(&p.name).copied().unwrap_or(false))
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: Stage,
    pub mask: FreezeMask,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta: f64,
    pub delta: f64,
    /// Train on the routing loss alone (RP variant).
    pub routing_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_rp: f64,
    pub lr_mi: f64,
    pub lr_uco: f64,
    pub epochs_rp: usize,
    pub epochs_mi: usize,
    pub epochs_uco: usize,
    pub batch_size: usize,
    pub beta: f64,
    pub delta: f64,
    pub molora_fraction: f64,
    pub uco_fraction: f64,
    pub n_experts: usize,
    pub rank: usize,
    pub alpha: f64,
    pub rp_routing_only: bool,
    pub ft_lr: f64,
    pub lora_lr: f64,
    pub baseline_epochs: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Set by the run-level seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_rp: 2e-4,
            lr_mi: 2e-4,
            lr_uco: 2e-5,
            epochs_rp: 1,
            epochs_mi: 2,
            epochs_uco: 1,
            batch_size: 16,
            beta: 0.01,
            delta: 0.95,
            molora_fraction: 0.2,
            uco_fraction: 0.1,
            n_experts: 4,
            rank: 8,
            alpha: 2.0,
            rp_routing_only: false,
            ft_lr: 2e-5,
            lora_lr: 2e-4,
            baseline_epochs: 2,
            lora_rank: 16,
            lora_alpha: 16.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Hyperparameters calibrated for the tiny desk model, where the
    /// large-model learning rates barely move the weights.
    pub fn desk() -> Self {
        Self {
            lr_rp: 1e-2,
            lr_mi: 3e-3,
            lr_uco: 2e-3,
            epochs_rp: 1,
            epochs_mi: 8,
            epochs_uco: 4,
            batch_size: 8,
            beta: 0.3,
            rank: 16,
            ft_lr: 1e-3,
            lora_lr: 1e-3,
            baseline_epochs: 6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("molora_fraction", self.molora_fraction), ("uco_fraction", self.uco_fraction)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(CitiError::contract(format!("{name} = {v} outside (0, 1]")));
            }
        }
        for (name, v) in [
            ("lr_rp", self.lr_rp),
            ("lr_mi", self.lr_mi),
            ("lr_uco", self.lr_uco),
            ("ft_lr", self.ft_lr),
            ("lora_lr", self.lora_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CitiError::contract(format!("{name} = {v} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(CitiError::contract(format!("delta = {} outside [0, 1]", self.delta)));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(CitiError::contract(format!("beta = {} must be non-negative", self.beta)));
        }
        if self.batch_size == 0 {
            return Err(CitiError::contract("batch_size must be positive"));
        }
        self.adapter_config().validate()
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            n_experts: self.n_experts,
            rank: self.rank,
            alpha: self.alpha,
            delta: self.delta,
            router: RouterKind::Suppression,
        }
    }
}

/// Recorded loss terms of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: String,
    pub step: usize,
    pub loss: f64,
    pub nll: f64,
    pub routing: f64,
    /// Mean suppression probability over tool tokens, across adapters.
    pub gate0_tool: Option<f64>,
    pub gate0_other: Option<f64>,
}

/// Scalar pieces of the total loss recorded on a graph.
pub struct LossTerms {
    pub total: Var,
    pub nll: Var,
    pub routing: Option<Var>,
    pub gates: Vec<(ComponentId, Var)>,
    pub token_flags: Vec<bool>,
}

/// `mean NLL + β · mean routing loss over suppression adapters`.
pub fn total_loss_graph<T: Float>(
    g: &mut Graph<T>,
    model: &Model<T>,
    batch: &[&SyntheticExample],
    beta: f64,
    delta: f64,
) -> Result<LossTerms> {
    let pairs: Vec<Pair<'_>> = batch
        .iter()
        .map(|e| Pair {
            prompt: &e.prompt,
            target: &e.target,
        })
        .collect();
    let (nll, trace) = model.nll_graph(g, &pairs)?;
    let mut token_flags = Vec::new();
    for (e, span) in batch.iter().zip(&trace.spans) {
        token_flags.extend(std::iter::repeat_n(e.is_tool, span.len));
    }
    let mut routing_terms = Vec::new();
    for (cid, gate) in &trace.gates {
        let adapter = &model.adapters()[cid];
        if adapter.config.router != RouterKind::Suppression {
            continue;
        }
        let imp = importance_matrix::<T>(&token_flags, adapter.config.n_experts, delta)?;
        routing_terms.push(routing_loss_graph(g, *gate, imp)?);
    }
    let routing = match routing_terms.split_first() {
        None => None,
        Some((first, rest)) => {
            let mut acc = *first;
            for r in rest {
                acc = g.add(acc, *r)?;
            }
            Some(g.scale(acc, T::from_f64_lossy(1.0 / routing_terms.len() as f64))?)
        }
    };
    let total = match routing {
        Some(r) if beta != 0.0 => {
            let w = g.scale(r, T::from_f64_lossy(beta))?;
            g.add(nll, w)?
        }
        _ => nll,
    };
    Ok(LossTerms {
        total,
        nll,
        routing,
        gates: trace.gates,
        token_flags,
    })
}

/// Value of the total loss for one batch.
pub fn total_loss<T: Float>(model: &Model<T>, batch: &[SyntheticExample], beta: f64, delta: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(CitiError::contract("loss over an empty batch"));
    }
    let refs: Vec<&SyntheticExample> = batch.iter().collect();
    let mut g = Graph::inference();
    let terms = total_loss_graph(&mut g, model, &refs, beta, delta)?;
    Ok(g.value(terms.total).item().as_f64())
}

fn gate0_means<T: Float>(g: &Graph<T>, terms: &LossTerms, model: &Model<T>) -> (Option<f64>, Option<f64>) {
    let (mut st, mut nt, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (cid, gate) in &terms.gates {
        if model.adapters()[cid].config.router != RouterKind::Suppression {
            continue;
        }
        let v = g.value(*gate);
        for (r, &tool) in terms.token_flags.iter().enumerate() {
            let p0 = v.row(r)[0].as_f64();
            if tool {
                st += p0;
                nt += 1;
            } else {
                so += p0;
                no += 1;
            }
        }
    }
    ((nt > 0).then(|| st / nt as f64), (no > 0).then(|| so / no as f64))
}

/// Runs one stage. Only parameters the plan marks trainable change.
pub fn train_stage(
    model: &mut Model<f32>,
    plan: &StagePlan,
    data: &[SyntheticExample],
    seed: u64,
) -> Result<Vec<StepLog>> {
    let trainable = plan.mask.resolve(model)?;
    if plan.batch_size == 0 {
        return Err(CitiError::contract("batch_size must be positive"));
    }
    if plan.epochs > 0 && data.is_empty() {
        return Err(CitiError::contract("training on an empty dataset"));
    }
    let saved = model.trainable_set();
    model.set_trainable(&trainable);
    let result = run_epochs(model, plan, data, seed);
    model.set_trainable(&saved);
    result
}

fn run_epochs(model: &mut Model<f32>, plan: &StagePlan, data: &[SyntheticExample], seed: u64) -> Result<Vec<StepLog>> {
    let mut opt = Adam::<f32>::new(plan.lr);
    let mut logs = Vec::new();
    let mut step = 0;
    for epoch in 0..plan.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng_for(seed, &format!("{}/epoch{epoch}", plan.stage)));
        for chunk in order.chunks(plan.batch_size) {
            let batch: Vec<&SyntheticExample> = chunk.iter().map(|&i| &data[i]).collect();
            let mut g = Graph::new();
            let terms = total_loss_graph(&mut g, model, &batch, plan.beta, plan.delta)?;
            let objective = if plan.routing_only {
                terms
                    .routing
                    .ok_or_else(|| CitiError::contract("routing-only stage without suppression adapters"))?
            } else {
                terms.total
            };
            model.params_mut().zero_grads();
            g.backward_into(objective, model.params_mut())?;
            opt.step(model.params_mut());
            let (gate0_tool, gate0_other) = gate0_means(&g, &terms, model);
            logs.push(StepLog {
                stage: plan.stage.to_string(),
                step,
                loss: g.value(objective).item() as f64,
                nll: g.value(terms.nll).item() as f64,
                routing: terms.routing.map(|r| g.value(r).item() as f64).unwrap_or(0.0),
                gate0_tool,
                gate0_other,
            });
            step += 1;
        }
    }
    model.params_mut().zero_grads();
    Ok(logs)
}

/// Trains every parameter in `trainable` on plain NLL.
#[allow(clippy::too_many_arguments)]
pub fn train_params(
    model: &mut Model<f32>,
    trainable: &BTreeSet<ParamId>,
    data: &[SyntheticExample],
    lr: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    label: &str,
) -> Result<Vec<StepLog>> {
    let plan = StagePlan {
        stage: Stage::Uco,
        mask: FreezeMask::from_ids(model, trainable),
        lr,
        epochs,
        batch_size,
        beta: 0.0,
        delta: 0.0,
        routing_only: false,
    };
    let mut logs = train_stage(model, &plan, data, seed)?;
    for l in &mut logs {
        l.stage = label.to_string();
    }
    Ok(logs)
}

/// Components chosen for adapters and for backbone fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub adapter_ids: BTreeSet<ComponentId>,
    pub uco_ids: BTreeSet<ComponentId>,
    /// Bottom-ranked components dropped because they also carry an adapter.
    pub overlap: BTreeSet<ComponentId>,
}

/// Top `molora_fraction` by tool importance get adapters; bottom
/// `uco_fraction` by general importance are fine-tuned, minus any overlap.
pub fn place_components(m_scores: &NormalizedScores, c_scores: &NormalizedScores, config: &TrainConfig) -> Result<Placement> {
    let adapter_ids = select_by_rank(m_scores, SelectMode::Top, config.molora_fraction, config.seed)?;
    let bottom = select_by_rank(c_scores, SelectMode::Bottom, config.uco_fraction, config.seed)?;
    let overlap: BTreeSet<_> = bottom.intersection(&adapter_ids).copied().collect();
    let uco_ids: BTreeSet<_> = bottom.difference(&adapter_ids).copied().collect();
    if uco_ids.is_empty() {
        return Err(CitiError::contract(format!(
            "no UCO components left: all {} bottom-ranked components carry adapters ({:?})",
            bottom.len(),
            overlap.iter().map(|c| c.to_string()).collect::<Vec<_>>()
        )));
    }
    Ok(Placement {
        adapter_ids,
        uco_ids,
        overlap,
    })
}

/// Freeze masks of the three stages for a model that already carries its adapters.
pub fn stage_plans<T: Float>(model: &Model<T>, placement: &Placement, config: &TrainConfig) -> Result<[StagePlan; 3]> {
    let mut routers = BTreeSet::new();
    let mut experts = BTreeSet::new();
    for id in &placement.adapter_ids {
        let a = model
            .adapters()
            .get(id)
            .ok_or_else(|| CitiError::contract(format!("component {id} has no adapter attached")))?;
        routers.extend(a.router_params());
        experts.extend(a.expert_params());
    }
    let mut uco = BTreeSet::new();
    for id in &placement.uco_ids {
        uco.insert(model.component_param(*id)?);
    }
    let mi: BTreeSet<_> = routers.union(&experts).copied().collect();
    let plan = |stage, set: &BTreeSet<ParamId>, lr, epochs, routing_only| StagePlan {
        stage,
        mask: FreezeMask::from_ids(model, set),
        lr,
        epochs,
        batch_size: config.batch_size,
        beta: config.beta,
        delta: config.delta,
        routing_only,
    };
    Ok([
        plan(Stage::Rp, &routers, config.lr_rp, config.epochs_rp, config.rp_routing_only),
        plan(Stage::Mi, &mi, config.lr_mi, config.epochs_mi, false),
        plan(Stage::Uco, &uco, config.lr_uco, config.epochs_uco, false),
    ])
}

/// Output of `plan_stages`: placement plus the three plans, with adapters attached.
pub struct StagedModel {
    pub model: Model<f32>,
    pub placement: Placement,
    pub plans: [StagePlan; 3],
}

/// Attaches adapters to a copy of `base` and builds the stage plans.
pub fn plan_stages(
    base: &Model<f32>,
    m_scores: &NormalizedScores,
    c_scores: &NormalizedScores,
    config: &TrainConfig,
) -> Result<StagedModel> {
    config.validate()?;
    let placement = place_components(m_scores, c_scores, config)?;
    let mut model = base.clone();
    model.attach_adapters(&placement.adapter_ids, config.adapter_config(), config.seed)?;
    let plans = stage_plans(&model, &placement, config)?;
    Ok(StagedModel {
        model,
        placement,
        plans,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMethod {
    Ft,
    Lora,
}

/// Full fine-tuning of every backbone parameter, or plain LoRA adapters on
/// every component with the backbone frozen.
pub fn baseline_train(
    base: &Model<f32>,
    method: BaselineMethod,
    data: &[SyntheticExample],
    config: &TrainConfig,
) -> Result<(Model<f32>, Vec<StepLog>)> {
    let mut model = base.clone();
    let (trainable, lr, label) = match method {
        BaselineMethod::Ft => (model.backbone_params().into_iter().collect(), config.ft_lr, "FT"),
        BaselineMethod::Lora => {
            let ids: BTreeSet<_> = model.registry().ids().collect();
            model.attach_adapters(&ids, AdapterConfig::plain_lora(config.lora_rank, config.lora_alpha), config.seed)?;
            let set: BTreeSet<ParamId> = model.adapters().values().flat_map(|a| a.all_params()).collect();
            (set, config.lora_lr, "LoRA")
        }
    };
    let logs = train_params(
        &mut model,
        &trainable,
        data,
        lr,
        config.baseline_epochs,
        config.batch_size,
        config.seed,
        label,
    )?;
    Ok((model, logs))
}

/// Schedule for training a fresh model on the general tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub n_per_task: usize,
    pub epochs: usize,
    pub lr: f64,
    pub cooldown_epochs: usize,
    pub cooldown_lr: f64,
    pub batch_size: usize,
    /// Set by the run-level seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            n_per_task: 2000,
            epochs: 12,
            lr: 3e-3,
            cooldown_epochs: 4,
            cooldown_lr: 5e-4,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_task == 0 {
            return Err(CitiError::contract("n_per_task must be positive"));
        }
        if self.batch_size == 0 {
            return Err(CitiError::contract("batch_size must be positive"));
        }
        for (name, v) in [("lr", self.lr), ("cooldown_lr", self.cooldown_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CitiError::contract(format!("{name} = {v} must be positive")));
            }
        }
        Ok(())
    }

    /// The general-task training corpus.
    pub fn corpus(&self) -> Result<Vec<SyntheticExample>> {
        let mut data = Vec::with_capacity(self.n_per_task * TaskKind::GENERAL.len());
        for t in TaskKind::GENERAL {
            data.extend(generate_dataset(t, self.n_per_task, derive_seed(self.seed, &format!("pretrain/{t}")))?);
        }
        Ok(data)
    }
}

/// Trains every parameter of `model` on the general-task corpus, then cools
/// down at a lower rate.
pub fn pretrain(model: &mut Model<f32>, config: &PretrainConfig) -> Result<Vec<StepLog>> {
    config.validate()?;
    let data = config.corpus()?;
    let all: BTreeSet<ParamId> = model.params().ids().collect();
    let mut logs = train_params(
        model,
        &all,
        &data,
        config.lr,
        config.epochs,
        config.batch_size,
        derive_seed(config.seed, "pretrain/main"),
        "pretrain",
    )?;
    logs.extend(train_params(
        model,
        &all,
        &data,
        config.cooldown_lr,
        config.cooldown_epochs,
        config.batch_size,
        derive_seed(config.seed, "pretrain/cooldown"),
        "pretrain",
    )?);
    Ok(logs)
}

/// CSV with one row per optimizer step.
pub fn write_step_logs_csv<W: std::io::Write>(out: W, logs: &[StepLog]) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["stage", "step", "loss", "nll", "routing", "gate0_tool", "gate0_other"])
        .map_err(crate::importance::csv_err)?;
    for l in logs {
        w.write_record([
            l.stage.clone(),
            l.step.to_string(),
            format!("{:.9}", l.loss),
            format!("{:.9}", l.nll),
            format!("{:.9}", l.routing),
            opt(l.gate0_tool),
            opt(l.gate0_other),
        ])
        .map_err(crate::importance::csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Parameters whose bytes differ between two snapshots of one model layout.
pub fn changed_params<T: Float>(before: &Model<T>, after: &Model<T>) -> Result<BTreeSet<ParamId>> {
    if before.params().len() != after.params().len() {
        return Err(CitiError::contract("snapshots with different parameter layouts"));
    }
    let mut out = BTreeSet::new();
    for ((id, a), (_, b)) in before.params().iter().zip(after.params().iter()) {
        if a.name != b.name {
            return Err(CitiError::contract(format!("parameter {} vs {}", a.name, b.name)));
        }
        let same = a.tensor.shape() == b.tensor.shape()
            && a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits());
        if !same {
            out.insert(id);
        }
    }
    Ok(out)
}
