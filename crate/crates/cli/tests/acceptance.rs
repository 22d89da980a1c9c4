//! End-to-end acceptance checks at desk scale. Run with
//! `cargo test -p citi-cli --test acceptance`; one PASS/FAIL line per check.

#[path = "../../core/tests/support/gradcases.rs"]
mod gradcases;
#[path = "../../core/tests/support/rank.rs"]
mod rank;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Instant;

use rand::Rng;

use citi_cli::config::RunConfig;
use citi_core::harness::{
    comparison_table, export_router_traces, finetune_components, gate0_means, icc_experiment, importance_bundle,
    jaccard_report, lcs_len, rouge_l, run_replacement, train_alt_control, train_citi, classify_tool_output,
    CitiOptions, ComparisonTable, Datasets, ImportanceBundle, Method, ReportMeta, Taxonomy,
};
use citi_core::importance::SelectMode;
use citi_core::model::{ComponentId, Model, SiteKind};
use citi_core::molora::{importance_matrix, routing_loss, AdapterConfig};
use citi_core::numerics::{rng_for, Tensor};
use citi_core::tasks::{parse_tool_call, TaskKind, Vocabulary};
use citi_core::trainer::{baseline_train, changed_params, plan_stages, pretrain, train_stage, BaselineMethod};

const WORKERS: usize = 1;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
    secs: f64,
}

fn report(o: &Outcome) {
    let line = format!(
        "[{}] {:>2} {}: {} ({:.1}s)\n",
        if o.pass { "PASS" } else { "FAIL" },
        o.id,
        o.name,
        o.detail,
        o.secs
    );
    // Bypasses the test harness capture so the lines always show.
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn timed(id: usize, name: &'static str, f: impl FnOnce() -> (bool, String)) -> Outcome {
    bounded(id, name, None, f)
}

/// As `timed`, failing when the check takes longer than `limit` seconds.
fn bounded(id: usize, name: &'static str, limit: Option<f64>, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let t = Instant::now();
    let (pass, mut detail) = f();
    let secs = t.elapsed().as_secs_f64();
    let in_time = limit.is_none_or(|l| secs < l);
    if let Some(l) = limit {
        detail.push_str(&format!("; limit {l:.0}s"));
    }
    let o = Outcome {
        id,
        name,
        pass: pass && in_time,
        detail,
        secs,
    };
    report(&o);
    o
}

/// Everything trained from one seed.
struct SeedRun {
    pre: Model<f32>,
    data: Datasets,
    bundle: ImportanceBundle,
    rp_mi: Model<f32>,
    ft: Model<f32>,
    table: ComparisonTable,
    citi_secs: f64,
}

fn seed_run(seed: u64) -> SeedRun {
    let cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    let mut pre = Model::<f32>::build(cfg.model_config()).unwrap();
    pretrain(&mut pre, &cfg.pretrain_config()).unwrap();
    let data = cfg.data_config().build().unwrap();
    let bundle = importance_bundle(&pre, &data, cfg.data.n_importance, seed, WORKERS).unwrap();
    let train = cfg.train_config();
    let t = Instant::now();
    let run = train_citi(&pre, &bundle, &data.mixed, &train, CitiOptions::default()).unwrap();
    let citi_secs = t.elapsed().as_secs_f64();
    let ft = baseline_train(&pre, BaselineMethod::Ft, &data.tool_train, &train).unwrap().0;
    let lora = baseline_train(&pre, BaselineMethod::Lora, &data.tool_train, &train).unwrap().0;
    let methods = [Method::Vanilla, Method::Ft, Method::Lora, Method::Citi];
    let models: BTreeMap<Method, Model<f32>> = [
        (Method::Vanilla, pre.clone()),
        (Method::Ft, ft.clone()),
        (Method::Lora, lora),
        (Method::Citi, run.model),
    ]
    .into();
    let meta = ReportMeta {
        seed,
        config_hash: cfg.hash().unwrap(),
    };
    let table = comparison_table(&pre, &models, &methods, &data, &meta, WORKERS).unwrap();
    SeedRun {
        pre,
        data,
        bundle,
        rp_mi: run.after_mi,
        ft,
        table,
        citi_secs,
    }
}

fn crit_gradcheck() -> (bool, String) {
    let cases = gradcases::gradcheck_cases();
    let (worst_name, worst) = cases
        .iter()
        .fold(("", 0.0f64), |acc, (n, e)| if *e > acc.1 { (n, *e) } else { acc });
    let pass = cases.iter().all(|(_, e)| *e < 1e-4);
    (pass, format!("{} cases, max rel err {worst:.2e} ({worst_name})", cases.len()))
}

fn crit_importance_fidelity() -> (bool, String) {
    let rho = rank::importance_ablation_rho();
    (rho >= 0.6, format!("spearman {rho:.3} (need >= 0.6)"))
}

fn crit_zero_init() -> (bool, String) {
    let cfg = RunConfig::default();
    let base = Model::<f32>::build(cfg.model_config()).unwrap();
    let all: Vec<ComponentId> = base.registry().ids().collect();
    let mut rng = rng_for(7, "attach-sets");
    let mut sets: Vec<BTreeSet<ComponentId>> = vec![all.iter().copied().collect(), [all[0]].into()];
    for _ in 0..3 {
        sets.push(all.iter().copied().filter(|_| rng.gen_bool(0.3)).collect());
    }
    let seqs = [
        Vocabulary::standard().encode("CALL add(a=3,b=5)").unwrap(),
        Vocabulary::standard().encode("abc").unwrap(),
    ];
    let logits = |m: &Model<f32>| -> Vec<u32> {
        seqs.iter()
            .flat_map(|s| m.forward(s, &BTreeSet::new()).unwrap().0.into_data())
            .map(f32::to_bits)
            .collect()
    };
    let want = logits(&base);
    let mut ok = 0;
    for (i, ids) in sets.iter().filter(|s| !s.is_empty()).enumerate() {
        let mut m = base.clone();
        m.attach_adapters(ids, AdapterConfig::default(), i as u64).unwrap();
        if logits(&m) == want {
            ok += 1;
        }
    }
    let n = sets.iter().filter(|s| !s.is_empty()).count();
    (ok == n, format!("{ok}/{n} component sets bit-exact"))
}

fn crit_routing_identities() -> (bool, String) {
    let uniform = Tensor::<f64>::full(&[6, 5], 0.2);
    let flags = [true, false, true, false, false, true];
    let zero = routing_loss(&uniform, &importance_matrix(&flags, 4, 0.0).unwrap()).unwrap();
    let pair = Tensor::<f64>::from_rows(1, 2, vec![0.0, 2.0]).unwrap();
    let one = routing_loss(&pair, &importance_matrix(&[true], 1, 0.0).unwrap()).unwrap();
    (zero == 0.0 && one == 1.0, format!("uniform L_r = {zero}, {{0,2}} L_r = {one}"))
}

fn crit_router_separation(run: &SeedRun) -> (bool, String) {
    let records = export_router_traces(&run.rp_mi, &run.data.mixed_test(), None).unwrap();
    let (tool, other) = gate0_means(&records);
    let (tool, other) = (tool.unwrap_or(f64::NAN), other.unwrap_or(f64::NAN));
    let gap = other - tool;
    (
        gap >= 0.2 && run.citi_secs <= 1200.0,
        format!(
            "gate0 tool {tool:.3}, other {other:.3}, gap {gap:.3} (need >= 0.2); CITI training {:.0}s",
            run.citi_secs
        ),
    )
}

fn crit_forgetting(runs: &[(u64, SeedRun)]) -> (bool, String) {
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, (seed, run)) in runs.iter().enumerate() {
        let row = |l: &str| run.table.row(l).unwrap();
        let (ft, lora, citi) = (row("FT"), row("LoRA"), row("CITI"));
        let pre_ok = row("vanilla").accuracies.values().all(|&a| a >= 0.9);
        let ft_drop = -ft.mean_retention().unwrap();
        let citi_drop = -citi.mean_retention().unwrap();
        let a = ft_drop >= citi_drop + 0.15;
        let b = citi.mean_retention().unwrap() >= lora.mean_retention().unwrap() - 0.02;
        let best = ft.tool.correctness.max(lora.tool.correctness);
        let c = citi.tool.correctness >= 0.85 && citi.tool.correctness >= best - 0.05;
        pass &= pre_ok && a && c && (i > 0 || b);
        parts.push(format!(
            "seed {seed}: pre>=0.9 {pre_ok}, drop FT {ft_drop:.3} CITI {citi_drop:.3} (a {a}), \
             retention CITI {:.3} LoRA {:.3} (b {b}), C CITI {:.3} FT {:.3} LoRA {:.3} (c {c})",
            citi.mean_retention().unwrap(),
            lora.mean_retention().unwrap(),
            citi.tool.correctness,
            ft.tool.correctness,
            lora.tool.correctness,
        ));
    }
    (pass, parts.join("; "))
}

fn crit_replacement(run: &SeedRun) -> (bool, String) {
    let cfg = RunConfig::default().train_config();
    let tuned = finetune_components(&run.pre, &run.data.tool_train, &cfg).unwrap();
    let rep = run_replacement(
        &run.pre,
        &tuned,
        &run.bundle.c,
        &[0.2, 0.5],
        &[SelectMode::Top, SelectMode::Bottom],
        &run.data,
        WORKERS,
    )
    .unwrap();
    let find = |mode, f: f64| rep.rows.iter().find(|r| r.mode == mode && r.fraction == f).unwrap();
    let (top, bottom) = (find(SelectMode::Top, 0.5), find(SelectMode::Bottom, 0.2));
    let mut wins = 0;
    let mut parts = Vec::new();
    for t in TaskKind::GENERAL {
        let (dt, db) = (rep.drop(top, t.as_str()).unwrap(), rep.drop(bottom, t.as_str()).unwrap());
        if dt > db {
            wins += 1;
        }
        parts.push(format!("{t} {dt:.3}>{db:.3}"));
    }
    (wins >= 3, format!("T-50% vs D-20% drop: {} ({wins}/4)", parts.join(", ")))
}

fn crit_icc(run: &SeedRun) -> (bool, String) {
    let cfg = RunConfig::default();
    let alt = train_alt_control(&run.pre, &run.data, &cfg.train_config()).unwrap();
    let rep = icc_experiment(&run.pre, &run.ft, &alt, &run.data, cfg.data.n_probe, 0, WORKERS).unwrap();
    let mut wins = 0;
    let mut parts = Vec::new();
    for t in TaskKind::GENERAL {
        let s = rep.summary_for(SiteKind::FfnInput, t.as_str()).unwrap();
        if s.tool_exceeds_alt() {
            wins += 1;
        }
        parts.push(format!(
            "{t} {:.3} vs {:.3}",
            s.mean_tool.unwrap_or(f64::NAN),
            s.mean_alt.unwrap_or(f64::NAN)
        ));
    }
    (wins >= 3, format!("tool vs alt at FFN input: {} ({wins}/4)", parts.join(", ")))
}

fn crit_jaccard(run: &SeedRun) -> (bool, String) {
    let j = jaccard_report(&run.bundle.general).unwrap();
    let min = j.min_high_pair().unwrap_or(f64::NAN);
    (
        min > j.expected_random_high,
        format!("min high-group pair {min:.3} vs null {:.3}", j.expected_random_high),
    )
}

fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    let is_sub = |s: &[u8], t: &[u8]| {
        let mut it = t.iter();
        s.iter().all(|x| it.any(|y| y == x))
    };
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<u8> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
        if sub.len() > best && is_sub(&sub, b) {
            best = sub.len();
        }
    }
    best
}

fn crit_metrics() -> (bool, String) {
    let mut rng = rng_for(10, "rouge-pairs");
    let mut exact = 0;
    for _ in 0..200 {
        let a: Vec<u8> = (0..rng.gen_range(1..=10)).map(|_| rng.gen_range(0..4)).collect();
        let b: Vec<u8> = (0..rng.gen_range(1..=10)).map(|_| rng.gen_range(0..4)).collect();
        let l = brute_lcs(&a, &b);
        let want = if l == 0 {
            0.0
        } else {
            let (p, r) = (l as f64 / a.len() as f64, l as f64 / b.len() as f64);
            2.0 * p * r / (p + r)
        };
        if lcs_len(&a, &b) == l && rouge_l(&a, &b).unwrap() == want {
            exact += 1;
        }
    }
    let v = Vocabulary::standard();
    let gold = parse_tool_call(&v.encode("CALL add(a=3,b=5)").unwrap()).unwrap();
    let mut tax = Taxonomy::default();
    for s in ["abc", "CALL sub(a=3,b=5)", "CALL add(a=3,b=6)", "CALL add(a=3,b=5)xy"] {
        if let Some(k) = classify_tool_output(&v.encode(s).unwrap(), &gold) {
            tax.record(k);
        }
    }
    let t = tax.as_tuple();
    (
        exact == 200 && t == (1, 1, 1, 1),
        format!("ROUGE-L exact on {exact}/200 pairs; taxonomy {t:?}"),
    )
}

fn crit_freeze(run: &SeedRun) -> (bool, String) {
    let cfg = RunConfig::default().train_config();
    let staged = plan_stages(&run.pre, &run.bundle.m, &run.bundle.c, &cfg).unwrap();
    let mut model = staged.model;
    let data = &run.data.mixed[..64];
    let mut parts = Vec::new();
    let mut pass = true;
    for plan in &staged.plans {
        let plan = citi_core::trainer::StagePlan { epochs: 1, ..plan.clone() };
        let before = model.clone();
        train_stage(&mut model, &plan, data, 0).unwrap();
        let changed = changed_params(&before, &model).unwrap();
        let allowed = plan.mask.resolve(&model).unwrap();
        let ok = !changed.is_empty() && changed.is_subset(&allowed);
        pass &= ok;
        parts.push(format!("{:?} {}/{} changed ({ok})", plan.stage, changed.len(), allowed.len()));
    }
    (pass, parts.join(", "))
}

fn citi_bin(config: &Path, out: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_citi"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .stdout(Stdio::null())
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn crit_reproducibility() -> (bool, String) {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.json");
    let pipeline: [&[&str]; 11] = [
        &["pretrain"],
        &["importance"],
        &["finetune", "--method", "ft"],
        &["finetune", "--method", "lora"],
        &["finetune", "--method", "citi"],
        &["eval"],
        &["report"],
        &["icc"],
        &["replace-eval"],
        &["select-train"],
        &["router-trace"],
    ];
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        for args in pipeline {
            if !citi_bin(&config, d.path(), args) {
                return (false, format!("`citi {}` failed", args.join(" ")));
            }
        }
    }
    let (a, b) = (files(dirs[0].path()), files(dirs[1].path()));
    let reports = a.keys().filter(|p| p.starts_with("runs")).count();
    let differing: Vec<String> = a
        .keys()
        .chain(b.keys())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|p| a.get(*p) != b.get(*p))
        .map(|p| p.display().to_string())
        .collect();
    (
        differing.is_empty() && reports > 0,
        if differing.is_empty() {
            format!("{} files identical ({reports} report files)", a.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

#[test]
fn acceptance_suite() {
    let start = Instant::now();
    let mut outcomes = vec![
        bounded(1, "gradient correctness", Some(60.0), crit_gradcheck),
        bounded(2, "importance fidelity", Some(120.0), crit_importance_fidelity),
        timed(3, "zero-init transparency", crit_zero_init),
        timed(4, "routing-loss identities", crit_routing_identities),
        timed(10, "metric correctness", crit_metrics),
        timed(12, "reproducibility", crit_reproducibility),
    ];

    let t = Instant::now();
    let runs: Vec<(u64, SeedRun)> = SEEDS.iter().map(|&s| (s, seed_run(s))).collect();
    let train_secs = t.elapsed().as_secs_f64();
    let main = &runs[0].1;
    outcomes.push(timed(5, "router separation", || crit_router_separation(main)));
    let mut forgetting = timed(6, "forgetting trade-off", || crit_forgetting(&runs));
    forgetting.secs += train_secs;
    outcomes.push(forgetting);
    outcomes.push(timed(7, "replacement trend", || crit_replacement(main)));
    outcomes.push(timed(8, "co-directional shift", || crit_icc(main)));
    outcomes.push(timed(9, "jaccard consistency", || crit_jaccard(main)));
    outcomes.push(timed(11, "freeze integrity", || crit_freeze(main)));

    outcomes.sort_by_key(|o| o.id);
    let _ = std::io::stderr().write_all(b"\nacceptance summary\n");
    for o in &outcomes {
        report(o);
    }
    let total = start.elapsed().as_secs_f64();
    let _ = writeln!(std::io::stderr(), "total {total:.0}s (budget 2700s)");
    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
    assert!(total <= 2700.0, "suite took {total:.0}s");
}
