//! `key = value` run configuration. Lines starting with `#` are comments.
//! Unknown keys are rejected; [`RunConfig::render`] writes every key back.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use panseg::dmoe::DmoeConfig;
use panseg::model::{BackboneConfig, ModelConfig};
use panseg::prompts::PromptRegistry;
use panseg::synth::{DatasetConfig, GeneratorConfig};
use panseg::train::{AdamW, TrainConfig};

use crate::error::{CliError, Result};

pub const RUN_DIR_ENV: &str = "MSTP_RUN_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub dataset: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub seed: u64,
    /// Total generated cases; a fifth (rounded down) go to the test split.
    pub cases: usize,
    pub extent: usize,
    pub patch: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub token_dim: usize,
    pub full_res_kernel: usize,
    pub k: usize,
    pub k1: usize,
    pub k2: usize,
    pub r: usize,
    pub alpha: f64,
    pub balance_weight: f64,
    pub dmoe_layers: usize,
    pub d_p: usize,
    pub attn_dim: usize,
    pub vocab: usize,
    pub proposal_hidden: usize,
    pub lambda_ce: f64,
    pub use_ap: bool,
    pub use_tp: bool,
    pub use_dmoe: bool,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub tumor_fraction: f64,
    /// Seeds `seed..seed + seeds` for `ablate`.
    pub seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let b = &m.backbone;
        let t = TrainConfig::default();
        Self {
            command: String::new(),
            dataset: None,
            run_dir: None,
            checkpoint: None,
            prompts: None,
            seed: 0,
            cases: 250,
            extent: GeneratorConfig::default().extent,
            patch: b.patch,
            depth: b.depth,
            base_channels: b.base_channels,
            token_dim: b.token_dim,
            full_res_kernel: b.full_res_kernel,
            k: m.dmoe.k,
            k1: m.dmoe.k1,
            k2: m.dmoe.k2,
            r: m.dmoe.rank,
            alpha: m.dmoe.alpha,
            balance_weight: m.dmoe.balance_weight,
            dmoe_layers: m.dmoe_layers,
            d_p: m.d_p,
            attn_dim: m.attn_dim,
            vocab: m.vocab,
            proposal_hidden: m.proposal_hidden,
            lambda_ce: m.lambda_ce,
            use_ap: true,
            use_tp: true,
            use_dmoe: true,
            pretrain_epochs: 40,
            finetune_epochs: 20,
            batch_size: t.batch_size,
            // desk schedule; the optimizer's own default is far slower
            lr: 2e-3,
            weight_decay: t.optimizer.weight_decay,
            tumor_fraction: t.tumor_fraction,
            seeds: 3,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| CliError::Config(format!("bad value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(CliError::Config(format!("bad value {v:?} for {key}, expected true or false"))),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub const KEYS: [&'static str; 37] = [
        "command",
        "dataset",
        "run_dir",
        "checkpoint",
        "prompts",
        "seed",
        "cases",
        "extent",
        "patch",
        "depth",
        "base_channels",
        "token_dim",
        "full_res_kernel",
        "k",
        "k1",
        "k2",
        "r",
        "alpha",
        "balance_weight",
        "dmoe_layers",
        "d_p",
        "attn_dim",
        "vocab",
        "proposal_hidden",
        "lambda_ce",
        "use_ap",
        "use_tp",
        "use_dmoe",
        "pretrain_epochs",
        "finetune_epochs",
        "batch_size",
        "lr",
        "weight_decay",
        "tumor_fraction",
        "seeds",
        "n_train",
        "n_test",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "command" => self.command = v.to_string(),
            "dataset" => self.dataset = opt_path(v),
            "run_dir" => self.run_dir = opt_path(v),
            "checkpoint" => self.checkpoint = opt_path(v),
            "prompts" => self.prompts = opt_path(v),
            "seed" => self.seed = parse(key, v)?,
            "cases" => self.cases = parse(key, v)?,
            "extent" => self.extent = parse(key, v)?,
            "patch" => self.patch = parse(key, v)?,
            "depth" => self.depth = parse(key, v)?,
            "base_channels" => self.base_channels = parse(key, v)?,
            "token_dim" => self.token_dim = parse(key, v)?,
            "full_res_kernel" => self.full_res_kernel = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "k1" => self.k1 = parse(key, v)?,
            "k2" => self.k2 = parse(key, v)?,
            "r" => self.r = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "balance_weight" => self.balance_weight = parse(key, v)?,
            "dmoe_layers" => self.dmoe_layers = parse(key, v)?,
            "d_p" => self.d_p = parse(key, v)?,
            "attn_dim" => self.attn_dim = parse(key, v)?,
            "vocab" => self.vocab = parse(key, v)?,
            "proposal_hidden" => self.proposal_hidden = parse(key, v)?,
            "lambda_ce" => self.lambda_ce = parse(key, v)?,
            "use_ap" => self.use_ap = parse_bool(key, v)?,
            "use_tp" => self.use_tp = parse_bool(key, v)?,
            "use_dmoe" => self.use_dmoe = parse_bool(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, v)?,
            "finetune_epochs" => self.finetune_epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "tumor_fraction" => self.tumor_fraction = parse(key, v)?,
            "seeds" => self.seeds = parse(key, v)?,
            // derived from `cases`; accepted so rendered files parse back
            "n_train" | "n_test" => {}
            _ => return Err(CliError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::ConfigLine { line: n + 1, reason: "expected key = value".into() })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| match e {
                CliError::Config(reason) => CliError::ConfigLine { line: n + 1, reason },
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn render(&self) -> String {
        let (n_train, n_test) = self.split_sizes();
        let values: [String; 37] = [
            self.command.clone(),
            show_path(&self.dataset),
            show_path(&self.run_dir),
            show_path(&self.checkpoint),
            show_path(&self.prompts),
            self.seed.to_string(),
            self.cases.to_string(),
            self.extent.to_string(),
            self.patch.to_string(),
            self.depth.to_string(),
            self.base_channels.to_string(),
            self.token_dim.to_string(),
            self.full_res_kernel.to_string(),
            self.k.to_string(),
            self.k1.to_string(),
            self.k2.to_string(),
            self.r.to_string(),
            self.alpha.to_string(),
            self.balance_weight.to_string(),
            self.dmoe_layers.to_string(),
            self.d_p.to_string(),
            self.attn_dim.to_string(),
            self.vocab.to_string(),
            self.proposal_hidden.to_string(),
            self.lambda_ce.to_string(),
            self.use_ap.to_string(),
            self.use_tp.to_string(),
            self.use_dmoe.to_string(),
            self.pretrain_epochs.to_string(),
            self.finetune_epochs.to_string(),
            self.batch_size.to_string(),
            self.lr.to_string(),
            self.weight_decay.to_string(),
            self.tumor_fraction.to_string(),
            self.seeds.to_string(),
            n_train.to_string(),
            n_test.to_string(),
        ];
        Self::KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Output root: `run_dir`, else `$MSTP_RUN_DIR`, else `runs`.
    pub fn root(&self) -> PathBuf {
        self.run_dir
            .clone()
            .or_else(|| std::env::var_os(RUN_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.root().join("dataset"))
    }

    /// Where `command` writes its artifacts.
    pub fn command_dir(&self, command: &str) -> PathBuf {
        self.root().join(command)
    }

    pub fn split_sizes(&self) -> (usize, usize) {
        let n_test = self.cases / 5;
        (self.cases - n_test, n_test)
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let (n_train, n_test) = self.split_sizes();
        DatasetConfig {
            seed: self.seed,
            n_train,
            n_val: 0,
            n_test,
            generator: GeneratorConfig { extent: self.extent, ..Default::default() },
            ..Default::default()
        }
    }

    /// Model configuration for a dataset with tumor classes `classes`.
    pub fn model_config(&self, classes: &[u8]) -> Result<ModelConfig> {
        let prompts = match &self.prompts {
            Some(p) => PromptRegistry::load(p)?,
            None => PromptRegistry::default_registry(),
        };
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                patch: self.patch,
                depth: self.depth,
                base_channels: self.base_channels,
                token_dim: self.token_dim,
                n_classes: classes.len() + 1,
                full_res_kernel: self.full_res_kernel,
            },
            d_p: self.d_p,
            attn_dim: self.attn_dim,
            vocab: self.vocab,
            proposal_hidden: self.proposal_hidden,
            use_ap: self.use_ap,
            use_tp: self.use_tp,
            use_dmoe: self.use_dmoe,
            dmoe: DmoeConfig { k1: self.k1, k2: self.k2, k: self.k, rank: self.r, alpha: self.alpha, balance_weight: self.balance_weight },
            dmoe_layers: self.dmoe_layers,
            lambda_ce: self.lambda_ce,
            classes: classes.to_vec(),
            prompts,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn train_config(&self, seed: u64, epochs: usize) -> TrainConfig {
        TrainConfig {
            seed,
            epochs,
            batch_size: self.batch_size,
            optimizer: AdamW { lr: self.lr, weight_decay: self.weight_decay, ..Default::default() },
            tumor_fraction: self.tumor_fraction,
            ..Default::default()
        }
    }

    pub fn pretrain_config(&self, seed: u64) -> TrainConfig {
        self.train_config(seed, self.pretrain_epochs)
    }

    pub fn finetune_config(&self, seed: u64) -> TrainConfig {
        self.train_config(seed, self.finetune_epochs)
    }
}
