//! Evaluation metrics and the experiment pipelines built on them.

pub mod data;
pub mod experiments;
pub mod metrics;
pub mod report;

pub use data::{DataConfig, Datasets};
pub use experiments::{
    citi_vs_baselines, comparison_table, evaluate_model, export_router_traces, finetune_components, gate0_means, icc_experiment,
    importance_bundle, jaccard_report, run_replacement, selective_experiment, train_alt_control, train_citi,
    train_method, train_uco_only, write_replacement_csv, write_router_traces_csv, CitiOptions, CitiRun, ComparisonTable,
    EvalReport, GateRecord, ImportanceBundle, JaccardReport, Method, ReportMeta, SelectiveConfig, SelectiveRow,
};
pub use metrics::{
    classify_tool_output, decode_all, evaluate_general, evaluate_toolcalls, lcs_len, rouge_l, Accuracies, Decoder,
    ErrorKind, FnDecoder, Taxonomy, ToolEval, MAX_NEW_TOKENS,
};
pub use report::{
    canonical_json, checkpoint_id, config_hash, run_dir, write_json, ExperimentKind, ExperimentSpec, RunManifest,
};
