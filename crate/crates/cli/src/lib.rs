//! Command-line driver: dataset generation, two-stage training, evaluation,
//! component ablation and parameter reports.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "panseg", version, about = "Prompted mixture-of-experts tumor segmentation on synthetic volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    Generate(Flags),
    /// Pretrain the backbone, prompts, fusion and heads.
    Pretrain(Flags),
    /// Fine-tune experts, routers, fusion and proposal from a checkpoint.
    Finetune(Flags),
    /// Evaluate a checkpoint on the test split.
    Evaluate(Flags),
    /// Run the five component variants for several seeds.
    Ablate(Flags),
    /// Print parameter counts of a checkpoint.
    ReportParams(Flags),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Pretrain(_) => "pretrain",
            Command::Finetune(_) => "finetune",
            Command::Evaluate(_) => "evaluate",
            Command::Ablate(_) => "ablate",
            Command::ReportParams(_) => "report-params",
        }
    }

    pub fn flags(&self) -> &Flags {
        match self {
            Command::Generate(f) | Command::Pretrain(f) | Command::Finetune(f) | Command::Evaluate(f) | Command::Ablate(f) | Command::ReportParams(f) => f,
        }
    }
}

/// Flags override values from `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total cases to generate (a fifth go to the test split).
    #[arg(long)]
    pub cases: Option<usize>,
    /// Replace an existing dataset.
    #[arg(long)]
    pub force: bool,
    #[arg(long, overrides_with = "no_use_ap")]
    pub use_ap: bool,
    #[arg(long)]
    pub no_use_ap: bool,
    #[arg(long, overrides_with = "no_use_tp")]
    pub use_tp: bool,
    #[arg(long)]
    pub no_use_tp: bool,
    #[arg(long, overrides_with = "no_use_dmoe")]
    pub use_dmoe: bool,
    #[arg(long)]
    pub no_use_dmoe: bool,
    /// Cubic patch edge in voxels.
    #[arg(long)]
    pub patch: Option<usize>,
    /// Epochs of the command's stage; `ablate` applies it to both stages.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output root (defaults to $MSTP_RUN_DIR, then `runs`).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Number of seeds for `ablate`.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Run ablation seeds concurrently.
    #[arg(long)]
    pub parallel: bool,
}

fn toggle(on: bool, off: bool) -> Option<bool> {
    match (on, off) {
        (true, _) => Some(true),
        (_, true) => Some(false),
        _ => None,
    }
}

/// Effective configuration: file (if any), then flags.
pub fn resolve(command: &Command) -> Result<RunConfig> {
    let f = command.flags();
    let mut cfg = match &f.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.command = command.name().to_string();
    if let Some(s) = f.seed {
        cfg.seed = s;
    }
    if let Some(c) = f.cases {
        cfg.cases = c;
    }
    if let Some(v) = toggle(f.use_ap, f.no_use_ap) {
        cfg.use_ap = v;
    }
    if let Some(v) = toggle(f.use_tp, f.no_use_tp) {
        cfg.use_tp = v;
    }
    if let Some(v) = toggle(f.use_dmoe, f.no_use_dmoe) {
        cfg.use_dmoe = v;
    }
    if let Some(p) = f.patch {
        cfg.patch = p;
    }
    if let Some(e) = f.epochs {
        match command {
            Command::Pretrain(_) => cfg.pretrain_epochs = e,
            Command::Finetune(_) => cfg.finetune_epochs = e,
            Command::Ablate(_) => {
                cfg.pretrain_epochs = e;
                cfg.finetune_epochs = e;
            }
            _ => {}
        }
    }
    if let Some(d) = &f.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(d) = &f.run_dir {
        cfg.run_dir = Some(d.clone());
    }
    if let Some(c) = &f.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    if let Some(n) = f.seeds {
        cfg.seeds = n;
    }
    Ok(cfg)
}

/// Runs one command and returns what it prints on success.
pub fn run(cli: &Cli) -> Result<String> {
    let cfg = resolve(&cli.command)?;
    let f = cli.command.flags();
    match &cli.command {
        Command::Generate(_) => commands::generate(&cfg, f.force),
        Command::Pretrain(_) => commands::cmd_pretrain(&cfg),
        Command::Finetune(_) => commands::cmd_finetune(&cfg),
        Command::Evaluate(_) => commands::cmd_evaluate(&cfg),
        Command::Ablate(_) => commands::cmd_ablate(&cfg, f.parallel),
        Command::ReportParams(_) => commands::cmd_report_params(&cfg),
    }
}
