//! Component ablation over anatomical prompts (AP), text prompts (TP) and
//! D-MoE. Per seed four backbones are pretrained, one per prompt
//! combination; variants sharing a prompt combination share the pretrain.

use std::path::Path;

use super::{evaluate, finetune_peft, pretrain, Checkpoint, MetricRecord, SplitData, Stage, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{ForwardOpts, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    None,
    Ap,
    Tp,
    Dmoe,
    All,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::None, Variant::Ap, Variant::Tp, Variant::Dmoe, Variant::All];

    /// `(use_ap, use_tp, use_dmoe)`.
    pub fn toggles(self) -> (bool, bool, bool) {
        match self {
            Variant::None => (false, false, false),
            Variant::Ap => (true, false, false),
            Variant::Tp => (false, true, false),
            Variant::Dmoe => (false, false, true),
            Variant::All => (true, true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::Ap => "ap",
            Variant::Tp => "tp",
            Variant::Dmoe => "dmoe",
            Variant::All => "all",
        }
    }

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let (use_ap, use_tp, use_dmoe) = self.toggles();
        ModelConfig { use_ap, use_tp, use_dmoe, ..base.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub seed: u64,
    pub variant: Variant,
    pub record: MetricRecord,
}

pub const ABLATION_HEADER_PREFIX: &str = "seed,variant,use_ap,use_tp,use_dmoe";

pub fn csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_HEADER_PREFIX);
    if let Some(first) = rows.first() {
        for (c, _, _) in &first.record.per_class {
            out.push_str(&format!(",dsc_class{c}"));
        }
    }
    out.push_str(",mean_dsc\n");
    for r in rows {
        let (a, t, d) = r.variant.toggles();
        out.push_str(&format!("{},{},{},{},{}", r.seed, r.variant.name(), a as u8, t as u8, d as u8));
        for (_, dsc, _) in &r.record.per_class {
            out.push_str(&format!(",{dsc:.6}"));
        }
        out.push_str(&format!(",{:.6}\n", r.record.mean_dsc));
    }
    out
}

/// Seed-averaged mean DSC per variant, in [`Variant::ALL`] order.
pub fn seed_means(rows: &[AblationRow]) -> Vec<(Variant, f64)> {
    Variant::ALL
        .iter()
        .map(|v| {
            let xs: Vec<f64> = rows.iter().filter(|r| r.variant == *v).map(|r| r.record.mean_dsc).collect();
            (*v, xs.iter().sum::<f64>() / xs.len().max(1) as f64)
        })
        .collect()
}

/// Result rows of one seed plus the per-epoch training records of each
/// pretrain, keyed by its `(use_ap, use_tp)` prompt combination.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub rows: Vec<AblationRow>,
    pub pretrain_history: Vec<((bool, bool), Vec<MetricRecord>)>,
}

/// Runs every variant for one seed. Checkpoints land in `out_dir` when given.
pub fn run_seed(base: &ModelConfig, pre: &TrainConfig, ft: &TrainConfig, train: &SplitData, test: &SplitData, out_dir: Option<&Path>) -> Result<SeedRun> {
    let seed = pre.seed;
    let mut rows = Vec::new();
    let mut pretrain_history = Vec::new();
    let save = |ckpt: &Checkpoint, name: &str| -> Result<()> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            ckpt.save(&dir.join(format!("{name}.ckpt")))?;
        }
        Ok(())
    };
    let ft = TrainConfig { seed, ..ft.clone() };
    // (AP, TP) prompt combination → variants built on that pretrain.
    let plans: [((bool, bool), &[Variant]); 4] = [
        ((false, false), &[Variant::None, Variant::Dmoe]),
        ((true, false), &[Variant::Ap]),
        ((false, true), &[Variant::Tp]),
        ((true, true), &[Variant::All]),
    ];
    for ((use_ap, use_tp), variants) in plans {
        let with_dmoe = variants.iter().any(|v| v.toggles().2);
        let pre_cfg = ModelConfig { use_ap, use_tp, use_dmoe: with_dmoe, ..base.clone() };
        log::info!("seed {seed}: pretraining ap={use_ap} tp={use_tp}");
        let (net, state) = pretrain(&pre_cfg, pre, train, None)?;
        let ckpt = Checkpoint::from_store(&state.store);
        save(&ckpt, &format!("pretrain_ap{}_tp{}", use_ap as u8, use_tp as u8))?;
        pretrain_history.push(((use_ap, use_tp), state.history.clone()));
        for v in variants.iter().copied() {
            let cfg = v.apply(base);
            let record = if v == Variant::None {
                // Plain backbone: the experts were never active.
                evaluate(&net, &state.store, test, "test", pre.epochs, ForwardOpts { dmoe_active: false })?.record
            } else {
                let ckpt = if with_dmoe && !cfg.use_dmoe { ckpt.without_groups(|g| g.starts_with("dmoe.")) } else { ckpt.clone() };
                let (fnet, fstate) = finetune_peft(&cfg, &ft, &ckpt, train, None)?;
                save(&Checkpoint::from_store(&fstate.store), v.name())?;
                evaluate(&fnet, &fstate.store, test, "test", ft.epochs, Stage::Finetune.opts())?.record
            };
            log::info!("seed {seed}: {} mean DSC {:.4}", v.name(), record.mean_dsc);
            rows.push(AblationRow { seed, variant: v, record });
        }
    }
    rows.sort_by_key(|r| Variant::ALL.iter().position(|v| *v == r.variant));
    Ok(SeedRun { rows, pretrain_history })
}
