use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use panseg::dmoe::DmoeConfig;
use panseg::model::{BackboneConfig, ModelConfig, Network};
use panseg::synth::recipe::default_recipes;
use panseg::synth::{generate_dataset, DatasetConfig, DatasetManifest, GeneratorConfig, Split};
use panseg::train::{
    dice_coefficient, finetune_peft, pretrain, AdamW, Checkpoint, DiceAccumulator, MetricRecord, SplitData, TrainConfig, METRICS_HEADER,
};
use panseg::Error;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig { patch: 8, depth: 2, base_channels: 2, token_dim: 8, n_classes: 4, full_res_kernel: 1 },
        d_p: 8,
        attn_dim: 4,
        vocab: 64,
        proposal_hidden: 6,
        dmoe: DmoeConfig { rank: 2, ..Default::default() },
        ..Default::default()
    }
}

fn tiny_cfg(epochs: usize) -> TrainConfig {
    TrainConfig { seed: 3, epochs, batch_size: 2, optimizer: AdamW { lr: 1e-3, ..Default::default() }, ..Default::default() }
}

fn tiny_dataset(dir: &std::path::Path) -> DatasetManifest {
    let recipes = default_recipes().into_iter().map(|r| panseg::synth::TumorRecipe { size_range_vox: (2.0, 3.0), ..r }).collect();
    let cfg = DatasetConfig {
        seed: 5,
        n_train: 6,
        n_val: 0,
        n_test: 3,
        generator: GeneratorConfig { extent: 16, ..Default::default() },
        recipes,
    };
    generate_dataset(dir, &cfg).unwrap()
}

fn hashes(store: &panseg::params::ParamStore, frozen: bool) -> BTreeMap<String, u64> {
    store
        .iter()
        .filter(|(_, p)| p.trainable != frozen)
        .map(|(_, p)| {
            let mut h = DefaultHasher::new();
            p.value.data().iter().for_each(|v| v.to_bits().hash(&mut h));
            (p.name.clone(), h.finish())
        })
        .collect()
}

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k * k + cout
}

fn linear(din: usize, dout: usize) -> usize {
    din * dout + dout
}

/// Parameter counts of a model config derived from the architecture
/// description alone: (total, PEFT-trainable).
fn closed_form(cfg: &ModelConfig) -> (usize, usize) {
    let b = &cfg.backbone;
    let ch = |l: usize| b.base_channels << l;
    let mut backbone = conv(1, ch(0), 3);
    for l in 1..=b.depth {
        let cout = if l == b.depth { b.token_dim } else { ch(l) };
        backbone += conv(ch(l - 1), cout, 3) + conv(cout, cout, 3);
    }
    for l in (0..b.depth).rev() {
        let cin = if l + 1 == b.depth { b.token_dim } else { ch(l + 1) };
        let k = if l == 0 { b.full_res_kernel } else { 3 };
        backbone += conv(cin, ch(l), 1) + conv(2 * ch(l), ch(l), k);
    }
    backbone += conv(ch(0), b.n_classes, 1);
    let text = if cfg.use_tp { cfg.vocab * cfg.d_p } else { 0 };
    let anatomy = if cfg.use_ap { conv(cfg.organs.len(), 4, 3) + conv(4, 8, 3) + linear(8, cfg.d_p) } else { 0 };
    let (d, da, dp) = (b.token_dim, cfg.attn_dim, cfg.d_p);
    let n_prompts = usize::from(cfg.use_tp) + usize::from(cfg.use_ap);
    let (fusion, proposal) = if n_prompts > 0 {
        let f = 2 * d * da + d + n_prompts * (dp * da + da + da * d);
        let pin = d + if cfg.use_tp { dp } else { 0 };
        (f, linear(pin, cfg.proposal_hidden) + linear(cfg.proposal_hidden, b.n_classes))
    } else {
        (0, 0)
    };
    let mut dmoe = 0;
    if cfg.use_dmoe {
        let t = cfg.classes.len();
        let m = &cfg.dmoe;
        let mut dims = vec![d];
        if cfg.dmoe_layers == 2 {
            dims.push(ch(b.depth - 1));
        }
        for dd in dims {
            dmoe += (m.k2 + t * m.k1) * 2 * dd * m.rank + dd * m.k2 + t * dd * (m.k1 + m.k2);
        }
    }
    let peft = dmoe + fusion + proposal;
    (backbone + text + anatomy + peft, peft)
}

#[test]
fn trainable_fraction_matches_closed_form() {
    let cfg = ModelConfig::default();
    let (_, mut store) = Network::build(&cfg, 0).unwrap();
    store.set_trainable_by_group(ModelConfig::is_peft_group);
    let count = store.count();
    let (total, peft) = closed_form(&cfg);
    assert_eq!((count.total, count.trainable), (total, peft));
    // frozen from the oracle above
    assert_eq!((total, peft), (256_032, 18_660));
    assert_eq!(count.trainable_fraction(), 18_660.0 / 256_032.0);
    assert!(count.trainable_fraction() <= 0.15);

    for (ap, tp, dm) in [(false, false, false), (true, false, true), (false, true, false), (true, true, true)] {
        for layers in [1, 2] {
            let c = ModelConfig { use_ap: ap, use_tp: tp, use_dmoe: dm, dmoe_layers: layers, ..tiny_model() };
            let (_, mut s) = Network::build(&c, 1).unwrap();
            s.set_trainable_by_group(ModelConfig::is_peft_group);
            let n = s.count();
            assert_eq!((n.total, n.trainable), closed_form(&c), "ap={ap} tp={tp} dmoe={dm} layers={layers}");
        }
    }
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_model();
    let (_, store) = Network::build(&cfg, 9).unwrap();
    let ck = Checkpoint::from_store(&store);
    let path = dir.path().join("a.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let (_, mut fresh) = Network::build(&cfg, 10).unwrap();
    back.restore(&mut fresh).unwrap();
    for ((_, a), (_, b)) in store.iter().zip(fresh.iter()) {
        let bits = |p: &panseg::params::Param| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b), "{}", a.name);
    }

    let bytes = ck.to_bytes();
    let mut bad = bytes.clone();
    bad[0] ^= 0xFF;
    let err = Checkpoint::from_bytes(&bad).unwrap_err().to_string();
    assert!(err.contains("magic"), "{err}");
    let mut bad = bytes.clone();
    bad[8] = 9;
    assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version"));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));

    // a different class count changes the head only
    let plain = ModelConfig { use_ap: false, use_tp: false, use_dmoe: false, ..tiny_model() };
    let (_, s4) = Network::build(&plain, 0).unwrap();
    let three = ModelConfig {
        backbone: BackboneConfig { n_classes: 3, ..plain.backbone.clone() },
        classes: vec![1, 2],
        ..plain.clone()
    };
    let (_, mut s3) = Network::build(&three, 0).unwrap();
    let err = Checkpoint::from_store(&s4).restore(&mut s3).unwrap_err().to_string();
    assert!(err.contains("backbone.head"), "{err}");

    // missing and unknown groups are named
    let partial = ck.without_groups(|g| g == "proposal");
    let (_, mut full) = Network::build(&cfg, 0).unwrap();
    let err = partial.restore(&mut full).unwrap_err().to_string();
    assert!(err.contains("proposal"), "{err}");
    let (_, mut small) = Network::build(&plain, 0).unwrap();
    let err = ck.restore(&mut small).unwrap_err().to_string();
    assert!(err.contains("fusion.kv"), "{err}");
}

#[test]
fn pretrain_then_finetune_freezes_the_backbone() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(dir.path());
    let model = tiny_model();
    let data = SplitData::load(&m, Split::Train, &model).unwrap();
    let csv = dir.path().join("metrics.csv");
    let (_, pre) = pretrain(&model, &tiny_cfg(2), &data, Some(&csv)).unwrap();
    assert_eq!(pre.history.len(), 2);
    assert!(pre.history.iter().all(|r| r.dice_loss.is_finite() && r.ce_loss.is_finite()));
    assert!(pre.store.iter().filter(|(_, p)| p.group.starts_with("dmoe.")).all(|(_, p)| !p.trainable));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some(METRICS_HEADER));
    assert_eq!(text.lines().count(), 1 + 2 * 3);

    let ck = Checkpoint::from_store(&pre.store);
    let (_, mut before) = Network::build(&model, 3).unwrap();
    ck.restore(&mut before).unwrap();
    before.set_trainable_by_group(ModelConfig::is_peft_group);
    let frozen_before = hashes(&before, true);
    let trainable_before = hashes(&before, false);

    let (_, ft) = finetune_peft(&model, &tiny_cfg(2), &ck, &data, None).unwrap();
    assert_eq!(hashes(&ft.store, true), frozen_before);
    let trainable_after = hashes(&ft.store, false);
    assert_eq!(trainable_after.len(), trainable_before.len());
    assert!(trainable_after.iter().any(|(k, h)| trainable_before[k] != *h));
    let with_moments: Vec<_> = ft.moments.m.keys().copied().collect();
    let trainable: Vec<_> = ft.store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    assert_eq!(with_moments, trainable);
    for (_, p) in ft.store.iter() {
        let peft = ModelConfig::is_peft_group(&p.group);
        assert_eq!(p.trainable, peft, "{}", p.group);
    }
    let frac = ft.trainable_fraction();
    let c = ft.store.count();
    assert_eq!(frac, c.trainable as f64 / c.total as f64);
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(dir.path());
    let model = tiny_model();
    let data = SplitData::load(&m, Split::Train, &model).unwrap();
    let (_, a) = pretrain(&model, &tiny_cfg(2), &data, None).unwrap();
    let (_, b) = pretrain(&model, &tiny_cfg(2), &data, None).unwrap();
    assert_eq!(Checkpoint::from_store(&a.store).to_bytes(), Checkpoint::from_store(&b.store).to_bytes());
    assert_eq!(a.history, b.history);
}

#[test]
fn class_registry_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(dir.path());
    let model = ModelConfig { classes: vec![1, 2], backbone: BackboneConfig { n_classes: 3, ..tiny_model().backbone }, use_tp: false, ..tiny_model() };
    assert!(matches!(SplitData::load(&m, Split::Train, &model), Err(Error::Config(_))));
}

#[test]
fn dice_fixtures() {
    let mask = |idx: &[usize]| {
        let mut m = vec![false; 16];
        idx.iter().for_each(|i| m[*i] = true);
        m
    };
    let a = mask(&[0, 1, 2, 3]);
    assert!((dice_coefficient(&a, &a) - 1.0).abs() < 1e-6);
    assert!(dice_coefficient(&a, &mask(&[8, 9, 10, 11])).abs() < 1e-6);
    assert!((dice_coefficient(&a, &mask(&[2, 3, 4, 5])) - 0.5).abs() < 1e-6);
    assert_eq!(dice_coefficient(&mask(&[]), &mask(&[])), 1.0);

    let truth = [0u8, 1, 1, 0, 2, 2, 0, 0];
    let mut acc = DiceAccumulator::new(4);
    acc.add(&truth, &truth).unwrap();
    assert_eq!((acc.dsc(1), acc.dsc(2)), (1.0, 1.0));
    assert!(acc.present(1) && !acc.present(3));
    let mut bg = DiceAccumulator::new(4);
    bg.add(&[0; 8], &truth).unwrap();
    assert_eq!((bg.dsc(1), bg.dsc(2)), (0.0, 0.0));
    assert!(bg.add(&[0; 3], &truth).is_err());

    let rec = MetricRecord {
        epoch: 2,
        split: "test".into(),
        per_class: vec![(1, 1.0, true), (2, 0.5, true), (3, 1.0, false)],
        mean_dsc: MetricRecord::mean_over_present(&[(1, 1.0, true), (2, 0.5, true), (3, 1.0, false)]),
        dice_loss: 0.25,
        ce_loss: 0.125,
        trainable_fraction: 0.5,
    };
    assert_eq!(rec.mean_dsc, 0.75);
    let rows = rec.csv_rows();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("2,test,2,0.5"), "{}", rows[1]);
}
