//! Two-stage training: backbone pretraining with the experts at identity,
//! then parameter-efficient fine-tuning of experts, routers and heads.

pub mod ablation;
pub mod adamw;
pub mod checkpoint;
pub mod data;
pub mod metrics;

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::Result;
use crate::model::{argmax_channels, ForwardOpts, ModelConfig, Network, Sample};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::rng::{derive_key, CounterRng};
use crate::synth::preprocess::AugmentConfig;

pub use adamw::{AdamW, Moments};
pub use checkpoint::Checkpoint;
pub use data::{PatchSample, SplitData};
pub use metrics::{dice_coefficient, DiceAccumulator, MetricRecord, METRICS_HEADER};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamW,
    /// Probability that a training patch is centered on a tumor voxel.
    pub tumor_fraction: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 40,
            batch_size: 4,
            optimizer: AdamW::default(),
            tumor_fraction: 0.5,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    fn stream(self) -> u64 {
        match self {
            Stage::Pretrain => 1,
            Stage::Finetune => 2,
        }
    }

    pub fn opts(self) -> ForwardOpts {
        ForwardOpts { dmoe_active: self == Stage::Finetune }
    }

    /// Trainable groups of the stage: everything but the experts and
    /// routers when pretraining, only experts, routers, fusion and the
    /// proposal head when fine-tuning.
    pub fn trains_group(self, group: &str) -> bool {
        match self {
            Stage::Pretrain => !group.starts_with("dmoe."),
            Stage::Finetune => ModelConfig::is_peft_group(group),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub store: ParamStore,
    pub moments: Moments,
    pub seed: u64,
    pub history: Vec<MetricRecord>,
}

impl TrainState {
    /// Applies the stage's trainable set and creates moments for it.
    pub fn new(mut store: ParamStore, stage: Stage, seed: u64) -> Self {
        store.set_trainable_by_group(|g| stage.trains_group(g));
        let moments = Moments::for_trainable(&store);
        Self { store, moments, seed, history: Vec::new() }
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.store.count().trainable_fraction()
    }
}

fn sample<'a>(p: &'a PatchSample, with_target: bool) -> Sample<'a> {
    Sample {
        image: &p.image,
        organ_mask: &p.organ_mask,
        task: p.task,
        target: with_target.then_some(p.target.as_slice()),
    }
}

/// Runs `cfg.epochs` epochs of one stage over `data`, one patch per case
/// per epoch, appending a train-split record per epoch.
pub fn train(net: &Network, state: &mut TrainState, data: &SplitData, cfg: &TrainConfig, stage: Stage, metrics_csv: Option<&Path>) -> Result<()> {
    if state.moments.m.is_empty() {
        log::info!("{stage:?}: no trainable parameters, nothing to do");
        return Ok(());
    }
    let stage_key = derive_key(cfg.seed, stage.stream());
    let n_channels = net.cfg.backbone.n_classes;
    for epoch in 0..cfg.epochs {
        let epoch_key = derive_key(stage_key, epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        CounterRng::new(epoch_key).shuffle(&mut order);
        let (mut dice_sum, mut ce_sum) = (0.0, 0.0);
        let mut acc = DiceAccumulator::new(n_channels);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut grads: BTreeMap<ParamId, Vec<f64>> = BTreeMap::new();
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut rng = CounterRng::derive(epoch_key, data.cases[i].index as u64 + 1);
                let p = data.train_patch(i, &net.cfg, cfg.tumor_fraction, &cfg.augment, &mut rng)?;
                let mut ctx = Ctx::new(&state.store);
                let out = net.forward(&mut ctx, &sample(&p, true), stage.opts())?;
                dice_sum += ctx.g.data(out.dice.expect("target given"))[0] as f64;
                ce_sum += out.ce.map_or(0.0, |c| ctx.g.data(c)[0] as f64);
                acc.add(&argmax_channels(ctx.g.value(out.logits)), &p.target)?;
                ctx.g.backward(out.loss.expect("target given"))?;
                for (id, g) in ctx.param_grads() {
                    let slot = grads.entry(id).or_insert_with(|| vec![0.0; g.len()]);
                    slot.iter_mut().zip(&g).for_each(|(s, v)| *s += w * *v as f64);
                }
            }
            cfg.optimizer.step(&mut state.store, &mut state.moments, &grads)?;
        }
        let record = make_record(epoch, "train", &net.cfg, &acc, dice_sum / data.len() as f64, ce_sum / data.len() as f64, state.trainable_fraction());
        log::info!("{stage:?} epoch {epoch}: dice loss {:.4}, ce {:.4}, train DSC {:.4}", record.dice_loss, record.ce_loss, record.mean_dsc);
        if let Some(path) = metrics_csv {
            record.append_csv(path)?;
        }
        state.history.push(record);
    }
    Ok(())
}

fn make_record(epoch: usize, split: &str, cfg: &ModelConfig, acc: &DiceAccumulator, dice_loss: f64, ce_loss: f64, trainable_fraction: f64) -> MetricRecord {
    let per_class: Vec<(u8, f64, bool)> = cfg
        .classes
        .iter()
        .enumerate()
        .map(|(i, c)| (*c, acc.dsc(i + 1), acc.present(i + 1)))
        .collect();
    MetricRecord {
        epoch,
        split: split.to_string(),
        mean_dsc: MetricRecord::mean_over_present(&per_class),
        per_class,
        dice_loss,
        ce_loss,
        trainable_fraction,
    }
}

/// Per-patch predictions and proposal logits on the centered patch of
/// every case of `data`.
pub struct Predictions {
    pub record: MetricRecord,
    /// Predicted proposal class channel per case, when a proposal exists.
    pub proposal: Vec<Option<usize>>,
}

/// Centered-patch evaluation with DSC pooled over the split.
pub fn evaluate(net: &Network, store: &ParamStore, data: &SplitData, split: &str, epoch: usize, opts: ForwardOpts) -> Result<Predictions> {
    let mut acc = DiceAccumulator::new(net.cfg.backbone.n_classes);
    let (mut dice_sum, mut ce_sum) = (0.0, 0.0);
    let mut proposal = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let p = data.eval_patch(i, &net.cfg)?;
        let mut ctx = Ctx::new(store);
        let out = net.forward(&mut ctx, &sample(&p, true), opts)?;
        dice_sum += ctx.g.data(out.dice.expect("target given"))[0] as f64;
        ce_sum += out.ce.map_or(0.0, |c| ctx.g.data(c)[0] as f64);
        acc.add(&argmax_channels(ctx.g.value(out.logits)), &p.target)?;
        proposal.push(out.theta.map(|t| ctx.g.value(t).argmax()));
    }
    let n = data.len().max(1) as f64;
    let record = make_record(epoch, split, &net.cfg, &acc, dice_sum / n, ce_sum / n, store.count().trainable_fraction());
    Ok(Predictions { record, proposal })
}

/// Builds the network and pretrains it from scratch.
pub fn pretrain(model: &ModelConfig, cfg: &TrainConfig, data: &SplitData, metrics_csv: Option<&Path>) -> Result<(Network, TrainState)> {
    let (net, store) = Network::build(model, cfg.seed)?;
    let mut state = TrainState::new(store, Stage::Pretrain, cfg.seed);
    train(&net, &mut state, data, cfg, Stage::Pretrain, metrics_csv)?;
    Ok((net, state))
}

/// Restores `ckpt` into a freshly built network and fine-tunes the PEFT
/// groups with everything else frozen.
pub fn finetune_peft(model: &ModelConfig, cfg: &TrainConfig, ckpt: &Checkpoint, data: &SplitData, metrics_csv: Option<&Path>) -> Result<(Network, TrainState)> {
    let (net, mut store) = Network::build(model, cfg.seed)?;
    ckpt.restore(&mut store)?;
    let mut state = TrainState::new(store, Stage::Finetune, cfg.seed);
    train(&net, &mut state, data, cfg, Stage::Finetune, metrics_csv)?;
    Ok((net, state))
}
