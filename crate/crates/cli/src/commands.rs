//! One function per subcommand. Commands share state only through files
//! under the output root:
//!
//! ```text
//! <out>/checkpoints/<name>/       model checkpoints
//! <out>/artifacts/importance.json importance bundle of the pretrained model
//! <out>/runs/<command>-<hash>/    reports plus run_manifest.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use serde::Serialize;

use citi_core::harness::{
    comparison_table, config_hash, evaluate_model, export_router_traces, finetune_components, gate0_means,
    icc_experiment, importance_bundle, jaccard_report, run_dir, run_replacement, selective_experiment,
    train_alt_control, train_citi, train_method, write_json, write_replacement_csv, write_router_traces_csv,
    CitiOptions, Datasets, EvalReport, ImportanceBundle, Method, ReportMeta, RunManifest,
};
use citi_core::importance::write_scores_csv;
use citi_core::model::{checkpoint, Model};
use citi_core::trainer::{baseline_train, pretrain, write_step_logs_csv, BaselineMethod, StepLog};
use citi_core::CitiError;

use crate::config::RunConfig;

pub const PRETRAINED: &str = "pretrained";
pub const COMPONENT_FT: &str = "component_ft";
pub const ALT: &str = "alt";

/// Ablation switches of `finetune --method citi`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Ablations {
    pub no_molora: bool,
    pub no_router_loss: bool,
    pub no_rp: bool,
}

impl Ablations {
    pub fn any(&self) -> bool {
        self.no_molora || self.no_router_loss || self.no_rp
    }

    pub fn options(&self) -> CitiOptions {
        CitiOptions {
            molora: !self.no_molora,
            router_loss: !self.no_router_loss,
            rp: !self.no_rp,
        }
    }
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub hash: String,
    pub out: PathBuf,
    pub workers: usize,
}

/// A run directory being filled, with its manifest.
struct Run {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Ctx {
    pub fn new(cfg: RunConfig, out: PathBuf, workers: usize) -> Result<Self> {
        let hash = cfg.hash()?;
        Ok(Self {
            cfg,
            hash,
            out,
            workers: workers.max(1),
        })
    }

    fn meta(&self) -> ReportMeta {
        ReportMeta {
            seed: self.cfg.seed,
            config_hash: self.hash.clone(),
        }
    }

    pub fn checkpoint_dir(&self, name: &str) -> PathBuf {
        self.out.join("checkpoints").join(name)
    }

    pub fn importance_path(&self) -> PathBuf {
        self.out.join("artifacts").join("importance.json")
    }

    fn start<T: Serialize>(&self, command: &str, args: &T) -> Result<Run> {
        let key = config_hash(&(&self.hash, command, args))?;
        let dir = run_dir(&self.out.join("runs"), command, &key);
        fs::create_dir_all(&dir)?;
        info!("{command}: writing to {}", dir.display());
        Ok(Run {
            dir,
            manifest: RunManifest::new(command, &self.hash, self.cfg.seed),
        })
    }

    fn finish(&self, run: Run) -> Result<PathBuf> {
        run.manifest.write(&run.dir)?;
        Ok(run.dir)
    }

    fn input(&self, run: &mut Run, path: &Path, kind: &str) -> Result<()> {
        Ok(run.manifest.add_input(&self.out, path, kind)?)
    }

    fn output(&self, run: &mut Run, path: &Path, kind: &str) -> Result<()> {
        Ok(run.manifest.add_output(&self.out, path, kind)?)
    }

    fn load(&self, run: &mut Run, name: &str) -> Result<Model<f32>> {
        let dir = self.checkpoint_dir(name);
        let m = checkpoint::load(&dir).with_context(|| format!("loading checkpoint {name}"))?;
        self.input(run, &dir, "checkpoint")?;
        Ok(m)
    }

    fn save(&self, run: &mut Run, model: &Model<f32>, name: &str) -> Result<()> {
        let dir = self.checkpoint_dir(name);
        checkpoint::save(model, &dir)?;
        self.output(run, &dir, "checkpoint")
    }

    fn data(&self) -> Result<Datasets> {
        Ok(self.cfg.data_config().build()?)
    }

    fn bundle(&self, run: &mut Run) -> Result<ImportanceBundle> {
        let p = self.importance_path();
        if !p.exists() {
            return Err(CitiError::MissingPath(p)).context("run `importance` first");
        }
        let b = serde_json::from_str(&fs::read_to_string(&p)?)?;
        self.input(run, &p, "importance")?;
        Ok(b)
    }

    fn json<T: Serialize>(&self, run: &mut Run, name: &str, value: &T) -> Result<()> {
        let p = run.dir.join(name);
        write_json(&p, value)?;
        self.output(run, &p, "report")
    }

    fn csv(
        &self,
        run: &mut Run,
        name: &str,
        write: impl FnOnce(BufWriter<File>) -> citi_core::Result<()>,
    ) -> Result<()> {
        let p = run.dir.join(name);
        write(BufWriter::new(File::create(&p)?))?;
        self.output(run, &p, "report")
    }
}

#[derive(Serialize)]
struct PretrainReport<'a> {
    steps: usize,
    final_loss: Option<f64>,
    evaluation: &'a EvalReport,
}

pub fn cmd_pretrain(ctx: &Ctx) -> Result<PathBuf> {
    let mut run = ctx.start("pretrain", &())?;
    let mut model = Model::<f32>::build(ctx.cfg.model_config())?;
    let logs = pretrain(&mut model, &ctx.cfg.pretrain_config())?;
    ctx.save(&mut run, &model, PRETRAINED)?;
    let data = ctx.data()?;
    let eval = evaluate_model(&model, &data, None, "vanilla", &ctx.meta(), ctx.workers)?;
    info!("pretrained general accuracy {:?}", eval.accuracies);
    ctx.csv(&mut run, "train_log.csv", |w| write_step_logs_csv(w, &logs))?;
    ctx.json(
        &mut run,
        "pretrain_report.json",
        &PretrainReport {
            steps: logs.len(),
            final_loss: logs.last().map(|l| l.loss),
            evaluation: &eval,
        },
    )?;
    ctx.finish(run)
}

pub fn cmd_importance(ctx: &Ctx) -> Result<PathBuf> {
    let mut run = ctx.start("importance", &())?;
    let model = ctx.load(&mut run, PRETRAINED)?;
    let data = ctx.data()?;
    let bundle = importance_bundle(&model, &data, ctx.cfg.data.n_importance, ctx.cfg.seed, ctx.workers)?;
    let p = ctx.importance_path();
    write_json(&p, &bundle)?;
    ctx.output(&mut run, &p, "importance")?;
    ctx.csv(&mut run, "scores_tool.csv", |w| write_scores_csv(w, &bundle.tool, &bundle.m))?;
    for t in &bundle.general {
        let name = format!("scores_{}.csv", t.label);
        ctx.csv(&mut run, &name, |w| write_scores_csv(w, t, &bundle.c))?;
    }
    let jac = jaccard_report(&bundle.general)?;
    ctx.csv(&mut run, "jaccard.csv", |w| jac.write_csv(w))?;
    ctx.json(&mut run, "jaccard.json", &jac)?;
    ctx.finish(run)
}

fn write_logs(ctx: &Ctx, run: &mut Run, logs: &[StepLog]) -> Result<()> {
    ctx.csv(run, "train_log.csv", |w| write_step_logs_csv(w, logs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMethod {
    Ft,
    Lora,
    Citi,
}

pub fn cmd_finetune(ctx: &Ctx, method: FinetuneMethod, ablations: Ablations) -> Result<PathBuf> {
    let mut run = ctx.start("finetune", &(method, ablations))?;
    let pre = ctx.load(&mut run, PRETRAINED)?;
    let data = ctx.data()?;
    let cfg = ctx.cfg.train_config();
    match method {
        FinetuneMethod::Ft | FinetuneMethod::Lora => {
            let (kind, m) = match method {
                FinetuneMethod::Ft => (BaselineMethod::Ft, Method::Ft),
                _ => (BaselineMethod::Lora, Method::Lora),
            };
            let (model, logs) = baseline_train(&pre, kind, &data.tool_train, &cfg)?;
            ctx.save(&mut run, &model, m.slug())?;
            write_logs(ctx, &mut run, &logs)?;
        }
        FinetuneMethod::Citi => {
            let bundle = ctx.bundle(&mut run)?;
            let options = ablations.options();
            let result = train_citi(&pre, &bundle, &data.mixed, &cfg, options)?;
            let m = options.method();
            ctx.save(&mut run, &result.model, m.slug())?;
            if m == Method::Citi {
                ctx.save(&mut run, &result.after_mi, Method::RpMi.slug())?;
            }
            write_logs(ctx, &mut run, &result.logs)?;
            ctx.json(&mut run, "placement.json", &result.placement)?;
        }
    }
    ctx.finish(run)
}

/// Evaluates the pretrained model plus every table method whose checkpoint
/// exists (or only `method` when given) and writes the comparison table.
pub fn cmd_eval(ctx: &Ctx, method: Option<Method>) -> Result<PathBuf> {
    let mut run = ctx.start("eval", &method)?;
    let pre = ctx.load(&mut run, PRETRAINED)?;
    let data = ctx.data()?;
    let mut models = BTreeMap::new();
    let mut order = vec![Method::Vanilla];
    models.insert(Method::Vanilla, pre.clone());
    let wanted: Vec<Method> = match method {
        Some(m) => vec![m],
        None => Method::ALL.to_vec(),
    };
    for m in wanted {
        if m == Method::Vanilla {
            continue;
        }
        if method.is_none() && !ctx.checkpoint_dir(m.slug()).exists() {
            continue;
        }
        models.insert(m, ctx.load(&mut run, m.slug())?);
        order.push(m);
    }
    let table = comparison_table(&pre, &models, &order, &data, &ctx.meta(), ctx.workers)?;
    for r in &table.rows {
        info!("{}: C {:.3} mean general {:.3}", r.label, r.tool.correctness, r.mean_general());
    }
    ctx.csv(&mut run, "citi_vs_baselines.csv", |w| table.write_csv(w))?;
    ctx.json(&mut run, "citi_vs_baselines.json", &table)?;
    ctx.finish(run)
}

/// The full comparison experiment: trains every configured method that has
/// no checkpoint yet, then evaluates them all.
pub fn cmd_report(ctx: &Ctx) -> Result<PathBuf> {
    let mut run = ctx.start("report", &())?;
    let pre = ctx.load(&mut run, PRETRAINED)?;
    let data = ctx.data()?;
    let cfg = ctx.cfg.train_config();
    let needs_bundle = ctx
        .cfg
        .methods
        .iter()
        .any(|m| !matches!(m, Method::Vanilla | Method::Ft | Method::Lora));
    let bundle = if needs_bundle { Some(ctx.bundle(&mut run)?) } else { None };
    let mut models = BTreeMap::new();
    for &m in &ctx.cfg.methods {
        if models.contains_key(&m) {
            continue;
        }
        if m == Method::Vanilla {
            models.insert(m, pre.clone());
        } else if ctx.checkpoint_dir(m.slug()).exists() {
            models.insert(m, ctx.load(&mut run, m.slug())?);
        } else {
            let b = bundle.as_ref().expect("bundle loaded for adapter methods");
            for (trained, model) in train_method(&pre, &data, b, &cfg, m)? {
                ctx.save(&mut run, &model, trained.slug())?;
                models.insert(trained, model);
            }
        }
    }
    let table = comparison_table(&pre, &models, &ctx.cfg.methods, &data, &ctx.meta(), ctx.workers)?;
    ctx.csv(&mut run, "citi_vs_baselines.csv", |w| table.write_csv(w))?;
    ctx.json(&mut run, "citi_vs_baselines.json", &table)?;
    ctx.finish(run)
}

/// Hidden-state increments of the FT model against a control fine-tuned on
/// the alternate task.
pub fn cmd_icc(ctx: &Ctx) -> Result<PathBuf> {
    let mut run = ctx.start("icc", &())?;
    let pre = ctx.load(&mut run, PRETRAINED)?;
    let tool = ctx.load(&mut run, Method::Ft.slug())?;
    let data = ctx.data()?;
    let alt = if ctx.checkpoint_dir(ALT).exists() {
        ctx.load(&mut run, ALT)?
    } else {
        let m = train_alt_control(&pre, &data, &ctx.cfg.train_config())?;
        ctx.save(&mut run, &m, ALT)?;
        m
    };
    let report = icc_experiment(&pre, &tool, &alt, &data, ctx.cfg.data.n_probe, ctx.cfg.seed, ctx.workers)?;
    ctx.csv(&mut run, "icc.csv", |w| report.write_csv(w))?;
    ctx.json(&mut run, "icc.json", &report)?;
    ctx.finish(run)
}

pub fn cmd_replace_eval(ctx: &Ctx) -> Result<PathBuf> {
    let mut run = ctx.start("replace-eval", &())?;
    let pre = ctx.load(&mut run, PRETRAINED)?;
    let bundle = ctx.bundle(&mut run)?;
    let data = ctx.data()?;
    let tuned = if ctx.checkpoint_dir(COMPONENT_FT).exists() {
        ctx.load(&mut run, COMPONENT_FT)?
    } else {
        let m = finetune_components(&pre, &data.tool_train, &ctx.cfg.train_config())?;
        ctx.save(&mut run, &m, COMPONENT_FT)?;
        m
    };
    let rep = run_replacement(
        &pre,
        &tuned,
        &bundle.c,
        &ctx.cfg.replacement.fractions,
        &ctx.cfg.replacement.modes,
        &data,
        ctx.workers,
    )?;
    ctx.csv(&mut run, "replacement.csv", |w| write_replacement_csv(w, &rep))?;
    ctx.json(&mut run, "replacement.json", &rep)?;
    ctx.finish(run)
}

pub fn cmd_select_train(ctx: &Ctx) -> Result<PathBuf> {
    let mut run = ctx.start("select-train", &())?;
    let pre = ctx.load(&mut run, PRETRAINED)?;
    let bundle = ctx.bundle(&mut run)?;
    let data = ctx.data()?;
    let rows = selective_experiment(
        &pre,
        &bundle.m,
        &data,
        &ctx.cfg.train_config(),
        &ctx.cfg.selective,
        &ctx.cfg.replacement.modes,
        &ctx.meta(),
        ctx.workers,
    )?;
    let table = citi_core::harness::ComparisonTable {
        rows: rows.iter().map(|r| r.report.clone()).collect(),
    };
    ctx.csv(&mut run, "selective.csv", |w| table.write_csv(w))?;
    ctx.json(&mut run, "selective.json", &rows)?;
    ctx.finish(run)
}

#[derive(Serialize)]
struct TraceSummary {
    method: Method,
    adapters: Vec<String>,
    rows: usize,
    gate0_tool: Option<f64>,
    gate0_other: Option<f64>,
}

pub fn cmd_router_trace(ctx: &Ctx, method: Method) -> Result<PathBuf> {
    let mut run = ctx.start("router-trace", &method)?;
    let model = ctx.load(&mut run, method.slug())?;
    let data = ctx.data()?;
    let records = export_router_traces(&model, &data.mixed_test(), None)?;
    let (gate0_tool, gate0_other) = gate0_means(&records);
    let adapters: BTreeSet<String> = records.iter().map(|r| r.adapter.to_string()).collect();
    ctx.csv(&mut run, "router_traces.csv", |w| write_router_traces_csv(w, &records))?;
    ctx.json(
        &mut run,
        "router_summary.json",
        &TraceSummary {
            method,
            adapters: adapters.into_iter().collect(),
            rows: records.len(),
            gate0_tool,
            gate0_other,
        },
    )?;
    ctx.finish(run)
}
