//! Experiment pipelines: importance bundles, the method comparison table with
//! its ablations, component replacement, group agreement, selective training,
//! hidden-state increments and router traces.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::data::Datasets;
use super::metrics::{evaluate_general, evaluate_toolcalls, Accuracies, ToolEval};
use crate::error::{CitiError, Result};
use crate::icc::{co_directional_report, probe_inputs, CoDirectionalReport};
use crate::importance::{
    aggregate_general_scores, component_importance_parallel, csv_err, expected_random_jaccard, jaccard_index,
    normalize_tool_scores, rank_and_partition, replacement_experiment, select_by_rank, ImportanceTable,
    NormalizedScores, ReplacementReport, ScoreKind, SelectMode,
};
use crate::model::{ComponentId, Model, SiteKind};
use crate::molora::{AdapterConfig, RouterKind};
use crate::numerics::{derive_seed, Graph, ParamId};
use crate::tasks::{SyntheticExample, TaskKind};
use crate::trainer::{
    baseline_train, place_components, stage_plans, train_params, train_stage, BaselineMethod, Placement, StepLog,
    TrainConfig,
};

/// Raw and normalized importance of the pretrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceBundle {
    pub tool: ImportanceTable,
    pub general: Vec<ImportanceTable>,
    pub m: NormalizedScores,
    pub c: NormalizedScores,
}

/// Scores the tool set and every general training set.
pub fn importance_bundle(
    model: &Model<f32>,
    data: &Datasets,
    n_samples: usize,
    seed: u64,
    workers: usize,
) -> Result<ImportanceBundle> {
    let tool = component_importance_parallel(model, &data.tool_train, n_samples, seed, "TOOLCALL", workers)?;
    let general = TaskKind::GENERAL
        .iter()
        .map(|t| component_importance_parallel(model, &data.general_train[t], n_samples, seed, t.as_str(), workers))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImportanceBundle {
        m: normalize_tool_scores(&tool)?,
        c: aggregate_general_scores(&general)?,
        tool,
        general,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    Ft,
    Lora,
    Citi,
    RpMi,
    UcoOnly,
    NoRouterLoss,
    NoRp,
    NoMolora,
}

impl Method {
    /// Rows of the comparison table.
    pub const TABLE: [Method; 8] = [
        Method::Vanilla,
        Method::Ft,
        Method::Lora,
        Method::Citi,
        Method::RpMi,
        Method::UcoOnly,
        Method::NoRouterLoss,
        Method::NoRp,
    ];

    pub const ALL: [Method; 9] = [
        Method::Vanilla,
        Method::Ft,
        Method::Lora,
        Method::Citi,
        Method::RpMi,
        Method::UcoOnly,
        Method::NoRouterLoss,
        Method::NoRp,
        Method::NoMolora,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Ft => "FT",
            Method::Lora => "LoRA",
            Method::Citi => "CITI",
            Method::RpMi => "RP+MI",
            Method::UcoOnly => "UCO-only",
            Method::NoRouterLoss => "w/o L_r",
            Method::NoRp => "w/o RP",
            Method::NoMolora => "w/o MOLoRA",
        }
    }

    /// Directory-safe name.
    pub fn slug(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Ft => "ft",
            Method::Lora => "lora",
            Method::Citi => "citi",
            Method::RpMi => "rp_mi",
            Method::UcoOnly => "uco_only",
            Method::NoRouterLoss => "no_router_loss",
            Method::NoRp => "no_rp",
            Method::NoMolora => "no_molora",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = CitiError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.slug() == s || m.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| CitiError::contract(format!("unknown method {s}")))
    }
}

/// Switches for the method's ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CitiOptions {
    /// Mixture adapters; off means a single plain LoRA of the same rank budget.
    pub molora: bool,
    /// Suppression router with routing loss; off means a plain mixture gate.
    pub router_loss: bool,
    pub rp: bool,
}

impl Default for CitiOptions {
    fn default() -> Self {
        Self {
            molora: true,
            router_loss: true,
            rp: true,
        }
    }
}

impl CitiOptions {
    pub fn method(&self) -> Method {
        match (self.molora, self.router_loss, self.rp) {
            (false, _, _) => Method::NoMolora,
            (true, false, _) => Method::NoRouterLoss,
            (true, true, false) => Method::NoRp,
            (true, true, true) => Method::Citi,
        }
    }

    pub fn adapter_config(&self, config: &TrainConfig) -> AdapterConfig {
        if !self.molora {
            let r = config.n_experts * config.rank;
            return AdapterConfig::plain_lora(r, config.alpha * config.n_experts as f64);
        }
        let mut a = config.adapter_config();
        if !self.router_loss {
            a.router = RouterKind::Plain;
        }
        a
    }
}

pub struct CitiRun {
    pub model: Model<f32>,
    /// Snapshot after the MI stage.
    pub after_mi: Model<f32>,
    pub placement: Placement,
    pub logs: Vec<StepLog>,
}

/// The three-stage pipeline on `data`, honoring the ablation switches.
pub fn train_citi(
    base: &Model<f32>,
    bundle: &ImportanceBundle,
    data: &[SyntheticExample],
    config: &TrainConfig,
    options: CitiOptions,
) -> Result<CitiRun> {
    config.validate()?;
    let placement = place_components(&bundle.m, &bundle.c, config)?;
    let mut model = base.clone();
    model.attach_adapters(&placement.adapter_ids, options.adapter_config(config), config.seed)?;
    let plans = stage_plans(&model, &placement, config)?;
    let mut logs = Vec::new();
    let mut after_mi = None;
    for (i, plan) in plans.iter().enumerate() {
        let skip = (i == 0 && !options.rp) || plan.mask.resolve(&model)?.is_empty();
        if !skip {
            let seed = derive_seed(config.seed, &plan.stage.to_string());
            logs.extend(train_stage(&mut model, plan, data, seed)?);
        }
        if i == 1 {
            after_mi = Some(model.clone());
        }
    }
    Ok(CitiRun {
        after_mi: after_mi.expect("three stages"),
        model,
        placement,
        logs,
    })
}

/// Bottom-ranked general components fine-tuned alone, without adapters.
pub fn train_uco_only(
    base: &Model<f32>,
    c_scores: &NormalizedScores,
    data: &[SyntheticExample],
    config: &TrainConfig,
) -> Result<(Model<f32>, Vec<StepLog>)> {
    let ids = select_by_rank(c_scores, SelectMode::Bottom, config.uco_fraction, config.seed)?;
    let mut model = base.clone();
    let trainable = component_params(&model, &ids)?;
    let logs = train_params(
        &mut model,
        &trainable,
        data,
        config.lr_uco,
        config.epochs_uco,
        config.batch_size,
        derive_seed(config.seed, "uco-only"),
        "UCO-only",
    )?;
    Ok((model, logs))
}

fn component_params(model: &Model<f32>, ids: &BTreeSet<ComponentId>) -> Result<BTreeSet<ParamId>> {
    ids.iter().map(|id| model.component_param(*id)).collect()
}

/// Evaluation of one model against the held-out sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    /// Exact-match accuracy per general task.
    pub accuracies: Accuracies,
    pub tool: ToolEval,
    /// Accuracy minus pretrained accuracy per general task.
    pub retention: Option<Accuracies>,
    pub checkpoint: Option<String>,
    pub seed: u64,
    pub config_hash: String,
}

impl EvalReport {
    pub fn mean_general(&self) -> f64 {
        mean(self.accuracies.values())
    }

    pub fn mean_retention(&self) -> Option<f64> {
        self.retention.as_ref().map(|r| mean(r.values()))
    }
}

fn mean<'a>(v: impl Iterator<Item = &'a f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Provenance stamped on every report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub config_hash: String,
}

pub fn evaluate_model(
    model: &Model<f32>,
    data: &Datasets,
    pretrained: Option<&Accuracies>,
    label: &str,
    meta: &ReportMeta,
    workers: usize,
) -> Result<EvalReport> {
    let accuracies = evaluate_general(model, &data.general_tests(), workers)?;
    let tool = evaluate_toolcalls(model, data.tool_test(), workers)?;
    let retention = pretrained.map(|p| {
        accuracies
            .iter()
            .filter_map(|(k, v)| p.get(k).map(|b| (k.clone(), v - b)))
            .collect()
    });
    Ok(EvalReport {
        label: label.to_string(),
        accuracies,
        tool,
        retention,
        checkpoint: None,
        seed: meta.seed,
        config_hash: meta.config_hash.clone(),
    })
}

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

/// Rows of evaluated methods with the columns C, R and each general task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<EvalReport>,
}

impl ComparisonTable {
    pub fn row(&self, label: &str) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["method".to_string(), "C (parse-match)".into(), "R".into()];
        header.extend(TaskKind::GENERAL.iter().map(|t| t.as_str().to_string()));
        header.extend(["mean_general".into(), "mean_retention".into()]);
        header.extend(super::metrics::ErrorKind::ALL.iter().map(|k| k.as_str().to_string()));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.label.clone(), fmt6(r.tool.correctness), fmt6(r.tool.rouge_l)];
            for t in TaskKind::GENERAL {
                rec.push(r.accuracies.get(t.as_str()).map(|v| fmt6(*v)).unwrap_or_default());
            }
            rec.push(fmt6(r.mean_general()));
            rec.push(r.mean_retention().map(fmt6).unwrap_or_default());
            let (a, b, c, d) = r.tool.taxonomy.as_tuple();
            rec.extend([a, b, c, d].iter().map(|x| x.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains one method from the pretrained model. CITI variants use the mixed
/// set; FT and LoRA train on tool data alone. A CITI run also yields its
/// RP+MI snapshot, so asking for either returns both.
pub fn train_method(
    pretrained: &Model<f32>,
    data: &Datasets,
    bundle: &ImportanceBundle,
    config: &TrainConfig,
    method: Method,
) -> Result<Vec<(Method, Model<f32>)>> {
    let ablation = |o: CitiOptions| -> Result<Vec<(Method, Model<f32>)>> {
        Ok(vec![(method, train_citi(pretrained, bundle, &data.mixed, config, o)?.model)])
    };
    match method {
        Method::Vanilla => Ok(vec![(method, pretrained.clone())]),
        Method::Ft => Ok(vec![(
            method,
            baseline_train(pretrained, BaselineMethod::Ft, &data.tool_train, config)?.0,
        )]),
        Method::Lora => Ok(vec![(
            method,
            baseline_train(pretrained, BaselineMethod::Lora, &data.tool_train, config)?.0,
        )]),
        Method::Citi | Method::RpMi => {
            let run = train_citi(pretrained, bundle, &data.mixed, config, CitiOptions::default())?;
            Ok(vec![(Method::Citi, run.model), (Method::RpMi, run.after_mi)])
        }
        Method::UcoOnly => Ok(vec![(method, train_uco_only(pretrained, &bundle.c, &data.mixed, config)?.0)]),
        Method::NoRouterLoss => ablation(CitiOptions {
            router_loss: false,
            ..CitiOptions::default()
        }),
        Method::NoRp => ablation(CitiOptions {
            rp: false,
            ..CitiOptions::default()
        }),
        Method::NoMolora => ablation(CitiOptions {
            molora: false,
            ..CitiOptions::default()
        }),
    }
}

/// Evaluates already trained models in the order of `methods`.
pub fn comparison_table(
    pretrained: &Model<f32>,
    models: &BTreeMap<Method, Model<f32>>,
    methods: &[Method],
    data: &Datasets,
    meta: &ReportMeta,
    workers: usize,
) -> Result<ComparisonTable> {
    let base = evaluate_general(pretrained, &data.general_tests(), workers)?;
    let mut rows = Vec::new();
    for m in methods {
        let model = models
            .get(m)
            .ok_or_else(|| CitiError::contract(format!("no trained model for {m}")))?;
        rows.push(evaluate_model(model, data, Some(&base), m.label(), meta, workers)?);
    }
    Ok(ComparisonTable { rows })
}

/// Trains and evaluates each requested method from the same pretrained model.
pub fn citi_vs_baselines(
    pretrained: &Model<f32>,
    data: &Datasets,
    bundle: &ImportanceBundle,
    config: &TrainConfig,
    methods: &[Method],
    meta: &ReportMeta,
    workers: usize,
) -> Result<(ComparisonTable, BTreeMap<Method, Model<f32>>)> {
    let mut models: BTreeMap<Method, Model<f32>> = BTreeMap::new();
    for &m in methods {
        if !models.contains_key(&m) {
            models.extend(train_method(pretrained, data, bundle, config, m)?);
        }
    }
    let table = comparison_table(pretrained, &models, methods, data, meta, workers)?;
    Ok((table, models))
}

/// Fine-tunes only the component matrices on tool data, leaving embeddings and
/// norms untouched so any component subset can be swapped into the pretrained model.
pub fn finetune_components(base: &Model<f32>, data: &[SyntheticExample], config: &TrainConfig) -> Result<Model<f32>> {
    let mut model = base.clone();
    let ids: BTreeSet<ComponentId> = model.registry().ids().collect();
    let trainable = component_params(&model, &ids)?;
    train_params(
        &mut model,
        &trainable,
        data,
        config.ft_lr,
        config.baseline_epochs,
        config.batch_size,
        derive_seed(config.seed, "component-ft"),
        "component-FT",
    )?;
    Ok(model)
}

/// Swaps ranked component subsets from `finetuned` into `vanilla` and scores
/// the general tasks.
pub fn run_replacement(
    vanilla: &Model<f32>,
    finetuned: &Model<f32>,
    scores: &NormalizedScores,
    fractions: &[f64],
    modes: &[SelectMode],
    data: &Datasets,
    workers: usize,
) -> Result<ReplacementReport> {
    let tests = data.general_tests();
    replacement_experiment(vanilla, finetuned, scores, fractions, modes, |m| {
        evaluate_general(m, &tests, workers)
    })
}

pub fn write_replacement_csv<W: Write>(out: W, report: &ReplacementReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["mode", "fraction", "n_swapped", "task", "accuracy", "drop"])
        .map_err(csv_err)?;
    for (label, acc) in [("vanilla", &report.vanilla), ("finetuned", &report.finetuned)] {
        for (task, a) in acc {
            let drop = report.vanilla[task] - a;
            w.write_record([label, "", "", task, &fmt6(*a), &fmt6(drop)]).map_err(csv_err)?;
        }
    }
    for row in &report.rows {
        for (task, a) in &row.accuracies {
            w.write_record([
                row.mode.as_str().to_string(),
                format!("{}", row.fraction),
                row.n_swapped.to_string(),
                task.clone(),
                fmt6(*a),
                report.drop(row, task).map(fmt6).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Pairwise Jaccard indices of the importance groups of each general task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JaccardReport {
    pub labels: Vec<String>,
    pub n_components: usize,
    /// Sizes of the high, moderate and low groups.
    pub group_sizes: [usize; 3],
    /// `matrices[g][i][j]` for group g.
    pub matrices: [Vec<Vec<f64>>; 3],
    /// Null expectation for two random high groups.
    pub expected_random_high: f64,
}

impl JaccardReport {
    /// Smallest off-diagonal high-group index.
    pub fn min_high_pair(&self) -> Option<f64> {
        let m = &self.matrices[0];
        let mut best: Option<f64> = None;
        for i in 0..m.len() {
            for j in i + 1..m.len() {
                best = Some(best.map_or(m[i][j], |b| b.min(m[i][j])));
            }
        }
        best
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["group", "task_a", "task_b", "jaccard", "expected_random"])
            .map_err(csv_err)?;
        for (g, name) in ["high", "moderate", "low"].iter().enumerate() {
            let expected = expected_random_jaccard(self.n_components, self.group_sizes[g])?;
            for i in 0..self.labels.len() {
                for j in 0..self.labels.len() {
                    w.write_record([
                        name.to_string(),
                        self.labels[i].clone(),
                        self.labels[j].clone(),
                        fmt6(self.matrices[g][i][j]),
                        fmt6(expected),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn jaccard_report(tables: &[ImportanceTable]) -> Result<JaccardReport> {
    if tables.is_empty() {
        return Err(CitiError::contract("jaccard over no tables"));
    }
    let parts = tables
        .iter()
        .map(|t| {
            Ok(rank_and_partition(&NormalizedScores {
                kind: ScoreKind::M,
                scores: t.shares()?,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let groups = |p: &crate::importance::RankingPartition| -> [BTreeSet<ComponentId>; 3] {
        [
            p.high.iter().copied().collect(),
            p.moderate.iter().copied().collect(),
            p.low.iter().copied().collect(),
        ]
    };
    let sets: Vec<[BTreeSet<ComponentId>; 3]> = parts.iter().map(groups).collect();
    let n = parts[0].order.len();
    let group_sizes = [parts[0].high.len(), parts[0].moderate.len(), parts[0].low.len()];
    let matrices = [0, 1, 2].map(|g| {
        sets.iter()
            .map(|a| sets.iter().map(|b| jaccard_index(&a[g], &b[g])).collect())
            .collect()
    });
    Ok(JaccardReport {
        labels: tables.iter().map(|t| t.label.clone()).collect(),
        n_components: n,
        group_sizes,
        matrices,
        expected_random_high: expected_random_jaccard(n, group_sizes[0])?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectiveConfig {
    pub fraction: f64,
    pub ft_epochs: usize,
    pub lora_epochs: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for SelectiveConfig {
    fn default() -> Self {
        Self {
            fraction: 0.2,
            ft_epochs: 1,
            lora_epochs: 2,
            lora_rank: 32,
            lora_alpha: 32.0,
        }
    }
}

impl SelectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(CitiError::contract(format!(
                "selective fraction = {} outside (0, 1]",
                self.fraction
            )));
        }
        if self.lora_rank == 0 {
            return Err(CitiError::contract("selective lora_rank must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectiveRow {
    pub mode: SelectMode,
    pub method: String,
    pub components: Vec<String>,
    pub report: EvalReport,
}

/// Trains only a top, bottom or random slice of components (by tool
/// importance) with full fine-tuning or plain LoRA on the mixed set.
#[allow(clippy::too_many_arguments)]
pub fn selective_experiment(
    pretrained: &Model<f32>,
    m_scores: &NormalizedScores,
    data: &Datasets,
    config: &TrainConfig,
    selective: &SelectiveConfig,
    modes: &[SelectMode],
    meta: &ReportMeta,
    workers: usize,
) -> Result<Vec<SelectiveRow>> {
    selective.validate()?;
    let base = evaluate_general(pretrained, &data.general_tests(), workers)?;
    let mut rows = Vec::new();
    for &mode in modes {
        let ids = select_by_rank(m_scores, mode, selective.fraction, config.seed)?;
        for method in [BaselineMethod::Ft, BaselineMethod::Lora] {
            let mut model = pretrained.clone();
            let (trainable, lr, epochs, label) = match method {
                BaselineMethod::Ft => (component_params(&model, &ids)?, config.ft_lr, selective.ft_epochs, "FT"),
                BaselineMethod::Lora => {
                    model.attach_adapters(
                        &ids,
                        AdapterConfig::plain_lora(selective.lora_rank, selective.lora_alpha),
                        config.seed,
                    )?;
                    let set = model.adapters().values().flat_map(|a| a.all_params()).collect();
                    (set, config.lora_lr, selective.lora_epochs, "LoRA")
                }
            };
            let tag = format!("selective/{}/{label}", mode.as_str());
            train_params(
                &mut model,
                &trainable,
                &data.mixed,
                lr,
                epochs,
                config.batch_size,
                derive_seed(config.seed, &tag),
                &tag,
            )?;
            rows.push(SelectiveRow {
                mode,
                method: label.to_string(),
                components: ids.iter().map(|c| c.to_string()).collect(),
                report: evaluate_model(
                    &model,
                    data,
                    Some(&base),
                    &format!("{}-{label}", mode.as_str()),
                    meta,
                    workers,
                )?,
            });
        }
    }
    Ok(rows)
}

/// Full fine-tuning on the alternate task, the control of the ICC experiment.
pub fn train_alt_control(base: &Model<f32>, data: &Datasets, config: &TrainConfig) -> Result<Model<f32>> {
    Ok(baseline_train(base, BaselineMethod::Ft, &data.alt_train, config)?.0)
}

/// Co-directional report over both probe sites with held-out probe inputs.
pub fn icc_experiment(
    reference: &Model<f32>,
    tool_sft: &Model<f32>,
    alt_sft: &Model<f32>,
    data: &Datasets,
    n_probe: usize,
    seed: u64,
    workers: usize,
) -> Result<CoDirectionalReport> {
    let tool_probes = probe_inputs(data.tool_test(), n_probe, derive_seed(seed, "probe/TOOLCALL"))?;
    let mut task_probes = BTreeMap::new();
    for t in TaskKind::GENERAL {
        let p = probe_inputs(&data.tests[&t], n_probe, derive_seed(seed, &format!("probe/{t}")))?;
        task_probes.insert(t.as_str().to_string(), p);
    }
    co_directional_report(
        reference,
        tool_sft,
        alt_sft,
        &tool_probes,
        &task_probes,
        &[SiteKind::FfnInput, SiteKind::AttnInput],
        workers,
    )
}

/// Router probabilities of one adapter at one token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub adapter: ComponentId,
    pub example: usize,
    pub token: usize,
    pub is_tool: bool,
    pub gates: Vec<f64>,
}

const TRACE_CHUNK: usize = 64;

/// Per-token router outputs over teacher-forced inputs (prompt plus target
/// without its final token). `ids` restricts the adapters; `None` means all
/// routed adapters.
pub fn export_router_traces(
    model: &Model<f32>,
    inputs: &[SyntheticExample],
    ids: Option<&BTreeSet<ComponentId>>,
) -> Result<Vec<GateRecord>> {
    let routed: BTreeSet<ComponentId> = model
        .adapters()
        .iter()
        .filter(|(_, a)| a.router.is_some())
        .map(|(c, _)| *c)
        .collect();
    if routed.is_empty() {
        return Err(CitiError::contract("router traces need adapters with routers"));
    }
    let wanted = match ids {
        Some(ids) => {
            if let Some(bad) = ids.iter().find(|c| !routed.contains(c)) {
                return Err(CitiError::contract(format!("component {bad} has no routed adapter")));
            }
            ids.clone()
        }
        None => routed,
    };
    let mut records = Vec::new();
    for (c, chunk) in inputs.chunks(TRACE_CHUNK).enumerate() {
        let seqs: Vec<Vec<usize>> = chunk
            .iter()
            .map(|e| {
                let mut s = e.prompt.clone();
                s.extend_from_slice(&e.target[..e.target.len().saturating_sub(1)]);
                s
            })
            .collect();
        let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
        let mut g = Graph::inference();
        let trace = model.forward_graph(&mut g, &refs, &BTreeSet::new(), false)?;
        for (cid, gate) in &trace.gates {
            if !wanted.contains(cid) {
                continue;
            }
            let v = g.value(*gate);
            for (k, (span, e)) in trace.spans.iter().zip(chunk).enumerate() {
                for t in 0..span.len {
                    records.push(GateRecord {
                        adapter: *cid,
                        example: c * TRACE_CHUNK + k,
                        token: t,
                        is_tool: e.is_tool,
                        gates: v.row(span.start + t).iter().map(|x| *x as f64).collect(),
                    });
                }
            }
        }
    }
    records.sort_by_key(|a| (a.example, a.adapter, a.token));
    Ok(records)
}

/// Mean gate entry 0 over tool rows and over other rows.
pub fn gate0_means(records: &[GateRecord]) -> (Option<f64>, Option<f64>) {
    let (mut st, mut nt, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for r in records {
        if r.is_tool {
            st += r.gates[0];
            nt += 1;
        } else {
            so += r.gates[0];
            no += 1;
        }
    }
    ((nt > 0).then(|| st / nt as f64), (no > 0).then(|| so / no as f64))
}

pub fn write_router_traces_csv<W: Write>(out: W, records: &[GateRecord]) -> Result<()> {
    let width = records.first().map(|r| r.gates.len()).unwrap_or(0);
    if records.iter().any(|r| r.gates.len() != width) {
        return Err(CitiError::contract("router traces mix gate widths"));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["adapter".to_string(), "example".into(), "token".into(), "is_tool".into()];
    header.extend((0..width).map(|i| format!("g{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in records {
        let mut rec = vec![
            r.adapter.to_string(),
            r.example.to_string(),
            r.token.to_string(),
            u8::from(r.is_tool).to_string(),
        ];
        rec.extend(r.gates.iter().map(|g| format!("{g:.9}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
