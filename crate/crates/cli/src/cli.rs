//! Argument parsing and dispatch.

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand, ValueEnum};

use citi_core::harness::Method;

use crate::commands::{self, Ablations, Ctx, FinetuneMethod};
use crate::config::load_config;

#[derive(Debug, Parser)]
#[command(name = "citi", version, about = "Component-aware tool-use fine-tuning experiments")]
pub struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root for checkpoints, artifacts and run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Worker threads for evaluation and importance scoring.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FinetuneArg {
    Ft,
    Lora,
    Citi,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trains a fresh model on the general tasks.
    Pretrain,
    /// Scores component importance on the tool and general sets.
    Importance,
    /// Fine-tunes the pretrained model for tool calling.
    Finetune {
        #[arg(long, value_enum)]
        method: FinetuneArg,
        #[arg(long)]
        no_molora: bool,
        #[arg(long)]
        no_router_loss: bool,
        #[arg(long)]
        no_rp: bool,
    },
    /// Evaluates the pretrained model and existing fine-tuned checkpoints.
    Eval {
        /// One method only, e.g. `citi` or `lora`.
        #[arg(long)]
        method: Option<Method>,
    },
    /// Trains any missing configured methods and writes the comparison table.
    Report,
    /// Hidden-state increment similarity of tool and alternate fine-tuning.
    Icc,
    /// Swaps fine-tuned components into the pretrained model.
    ReplaceEval,
    /// Trains selected component slices only.
    SelectTrain,
    /// Dumps per-token router probabilities.
    RouterTrace {
        #[arg(long, default_value = "citi")]
        method: Method,
    },
}

pub fn run(cli: Cli) -> Result<PathBuf> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let ctx = Ctx::new(cfg, cli.out, cli.workers)?;
    match cli.command {
        Command::Pretrain => commands::cmd_pretrain(&ctx),
        Command::Importance => commands::cmd_importance(&ctx),
        Command::Finetune {
            method,
            no_molora,
            no_router_loss,
            no_rp,
        } => {
            let ablations = Ablations {
                no_molora,
                no_router_loss,
                no_rp,
            };
            let method = match method {
                FinetuneArg::Ft => FinetuneMethod::Ft,
                FinetuneArg::Lora => FinetuneMethod::Lora,
                FinetuneArg::Citi => FinetuneMethod::Citi,
            };
            if ablations.any() && method != FinetuneMethod::Citi {
                bail!("--no-molora, --no-router-loss and --no-rp apply to --method citi only");
            }
            commands::cmd_finetune(&ctx, method, ablations)
        }
        Command::Eval { method } => commands::cmd_eval(&ctx, method),
        Command::Report => commands::cmd_report(&ctx),
        Command::Icc => commands::cmd_icc(&ctx),
        Command::ReplaceEval => commands::cmd_replace_eval(&ctx),
        Command::SelectTrain => commands::cmd_select_train(&ctx),
        Command::RouterTrace { method } => commands::cmd_router_trace(&ctx, method),
    }
}
