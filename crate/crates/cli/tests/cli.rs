use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use panseg::model::Network;
use panseg::synth::recipe::default_recipes;
use panseg::synth::volume::{read_labels, write_volume};
use panseg::synth::{generate_dataset, DatasetConfig, DatasetManifest, GeneratorConfig, TumorRecipe, Volume};
use panseg::train::Checkpoint;
use panseg_cli::{CliError, RunConfig};

const TINY: &str = "\
# small enough for debug-speed runs
extent = 24
patch = 16
depth = 2
base_channels = 2
token_dim = 8
d_p = 8
attn_dim = 4
vocab = 64
proposal_hidden = 6
r = 2
batch_size = 2
";

fn panseg(args: &[&str], run_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panseg"))
        .args(args)
        .env("MSTP_RUN_DIR", run_root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stderr: {}", stderr(&o));
    stdout(&o)
}

fn mean_dsc(out: &str) -> f64 {
    out.lines().find_map(|l| l.strip_prefix("mean_dsc ")).expect("mean_dsc line").parse().unwrap()
}

fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("tiny.cfg");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path
}

#[test]
fn config_parsing_rejects_unknown_keys_and_round_trips() {
    let err = RunConfig::parse_str("seed = 3\nlearning_rate = 0.1\n").unwrap_err();
    assert!(matches!(err, CliError::ConfigLine { line: 2, .. }), "{err}");
    assert!(RunConfig::parse_str("seed 3").is_err());
    assert!(RunConfig::parse_str("use_ap = maybe").is_err());
    assert!(RunConfig::parse_str("patch = -1").is_err());

    let mut cfg = RunConfig::parse_str(TINY).unwrap();
    cfg.use_tp = false;
    cfg.dataset = Some("/data/x".into());
    cfg.command = "ablate".into();
    let text = cfg.render();
    for key in RunConfig::KEYS {
        assert_eq!(text.lines().filter(|l| l.starts_with(&format!("{key} = "))).count(), 1, "{key}");
    }
    assert_eq!(RunConfig::parse_str(&text).unwrap(), cfg);
}

#[test]
fn flags_override_the_config_file() {
    use clap::Parser;
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_config(dir.path(), "seed = 4\nuse_ap = false\npretrain_epochs = 7\n");
    let cli = panseg_cli::Cli::try_parse_from(["panseg", "pretrain", "--config", path.to_str().unwrap(), "--seed", "9", "--use-ap", "--no-use-dmoe", "--epochs", "3"]).unwrap();
    let cfg = panseg_cli::resolve(&cli.command).unwrap();
    assert_eq!((cfg.seed, cfg.use_ap, cfg.use_tp, cfg.use_dmoe, cfg.pretrain_epochs, cfg.patch), (9, true, true, false, 3, 16));
    assert_eq!(cfg.command, "pretrain");
    let cli = panseg_cli::Cli::try_parse_from(["panseg", "ablate", "--use-tp", "--no-use-tp"]).unwrap();
    assert!(!panseg_cli::resolve(&cli.command).unwrap().use_tp);
}

#[test]
fn generate_writes_counts_refuses_overwrite_and_is_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(root.path(), "");
    let c = cfg.to_str().unwrap();
    let out = ok(panseg(&["generate", "--config", c, "--cases", "10", "--seed", "5"], root.path()));
    // default root comes from the environment
    let ds = root.path().join("dataset");
    let m = DatasetManifest::load(&ds).unwrap();
    assert_eq!(m.cases.len(), 10);
    assert_eq!(fs::read_dir(ds.join("cases")).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with("_img.raw")).count(), 10);
    let weights: Vec<f64> = m.classes.iter().map(|c| c.weight).collect();
    assert_eq!(weights, vec![0.5, 0.3, 0.2]);
    for class in &m.classes {
        assert!(out.contains(&format!("class {} host {} weight {} count {}", class.class_id, class.host_organ, class.weight, class.count)), "{out}");
    }
    assert!(fs::read_to_string(ds.join("config.txt")).unwrap().contains("seed = 5"));

    let refused = panseg(&["generate", "--config", c, "--cases", "10", "--seed", "5"], root.path());
    assert_eq!(refused.status.code(), Some(2));
    let msg = stderr(&refused);
    assert_eq!(msg.lines().count(), 1, "{msg}");
    assert!(msg.starts_with("error: refusing"), "{msg}");

    let first = fs::read(ds.join("manifest.txt")).unwrap();
    let img = fs::read(ds.join("cases/case_3_img.raw")).unwrap();
    ok(panseg(&["generate", "--config", c, "--cases", "10", "--seed", "5", "--force"], root.path()));
    assert_eq!(fs::read(ds.join("manifest.txt")).unwrap(), first);
    assert_eq!(fs::read(ds.join("cases/case_3_img.raw")).unwrap(), img);

    let other = root.path().join("other");
    ok(panseg(&["generate", "--config", c, "--cases", "10", "--seed", "6", "--dataset", other.to_str().unwrap()], root.path()));
    assert_ne!(fs::read(other.join("cases/case_3_img.raw")).unwrap(), img);
}

#[test]
fn missing_inputs_exit_with_code_two() {
    let root = tempfile::tempdir().unwrap();
    let o = panseg(&["finetune"], root.path());
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.starts_with("error: missing checkpoint"), "{msg}");
    assert_eq!(msg.lines().count(), 1);

    let o = panseg(&["pretrain"], root.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: missing dataset"));

    let bad = root.path().join("bad.cfg");
    fs::write(&bad, "nonsense = 1\n").unwrap();
    let o = panseg(&["pretrain", "--config", bad.to_str().unwrap()], root.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: config: line 1"), "{}", stderr(&o));
}

/// One-class dataset whose images are +1 on tumor voxels and -1 elsewhere.
fn label_coded_dataset(dir: &Path) {
    let recipe = TumorRecipe { size_range_vox: (2.0, 3.0), frequency_weight: 1.0, ..default_recipes()[0].clone() };
    let cfg = DatasetConfig { seed: 8, n_train: 2, n_val: 0, n_test: 4, generator: GeneratorConfig { extent: 16, ..Default::default() }, recipes: vec![recipe] };
    let m = generate_dataset(dir, &cfg).unwrap();
    for e in &m.cases {
        let labels = read_labels(&dir.join(&e.labels)).unwrap();
        let grid = labels.segmentation_target().unwrap().iter().map(|t| if *t > 0 { 1.0 } else { -1.0 }).collect();
        write_volume(&dir.join(&e.image), &Volume::new(labels.extents, labels.spacing_mm, grid).unwrap()).unwrap();
    }
}

/// Plain-backbone weights that pass the input straight through the stem and
/// the full-resolution skip, then threshold it in the head.
fn oracle_checkpoint(cfg: &RunConfig, background_bias: f32) -> Checkpoint {
    let model = cfg.model_config(&[1]).unwrap();
    let (_, mut store) = Network::build(&model, 0).unwrap();
    let mut set = |name: &str, f: &dyn Fn(&mut [f32])| {
        let id = store.id(name).unwrap_or_else(|| panic!("{name}"));
        f(store.get_mut(id).value.data_mut());
    };
    let c = cfg.base_channels;
    set("backbone.stem.w", &|w| {
        w.fill(0.0);
        w[13] = 1.0;
    });
    set("backbone.dec0.fuse.w", &|w| {
        w.fill(0.0);
        w[c] = 1.0;
    });
    set("backbone.dec0.fuse.b", &|b| b.fill(0.0));
    set("backbone.head.w", &|w| {
        w.fill(0.0);
        w[c] = 100.0;
    });
    set("backbone.head.b", &|b| {
        b[0] = background_bias;
        b[1] = 0.0;
    });
    Checkpoint::from_store(&store)
}

#[test]
fn evaluate_scores_the_oracle_fixture() {
    let root = tempfile::tempdir().unwrap();
    let ds = root.path().join("ds");
    label_coded_dataset(&ds);
    let cfg_path = tiny_config(root.path(), "use_ap = false\nuse_tp = false\nuse_dmoe = false\n");
    let cfg = RunConfig::load(&cfg_path).unwrap();
    for (bias, want) in [(0.5, 1.0), (1e3, 0.0)] {
        let ck = root.path().join(format!("oracle_{bias}.ckpt"));
        oracle_checkpoint(&cfg, bias).save(&ck).unwrap();
        let out = ok(panseg(
            &["evaluate", "--config", cfg_path.to_str().unwrap(), "--dataset", ds.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap()],
            root.path(),
        ));
        assert!((mean_dsc(&out) - want).abs() < 1e-6, "bias {bias}: {out}");
        let csv = fs::read_to_string(root.path().join("evaluate/eval.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);
    }
}

#[test]
fn pipeline_runs_and_is_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(root.path(), "pretrain_epochs = 2\nfinetune_epochs = 1\nseed = 3\n");
    let c = cfg_path.to_str().unwrap();
    let ds = root.path().join("ds");
    let d = ds.to_str().unwrap();
    ok(panseg(&["generate", "--config", c, "--cases", "8", "--dataset", d], root.path()));

    let runs: Vec<PathBuf> = (0..2).map(|i| root.path().join(format!("run{i}"))).collect();
    let mut evals = Vec::new();
    for run in &runs {
        let r = run.to_str().unwrap();
        let t = Instant::now();
        let out = ok(panseg(&["pretrain", "--config", c, "--dataset", d, "--run-dir", r], root.path()));
        assert!(t.elapsed().as_secs() < 300);
        assert!(out.contains("checkpoint"));
        let metrics = fs::read_to_string(run.join("pretrain/metrics.csv")).unwrap();
        assert_eq!(metrics.lines().next(), Some(panseg::train::METRICS_HEADER));
        assert_eq!(metrics.lines().count(), 1 + 2 * 3);
        ok(panseg(&["finetune", "--config", c, "--dataset", d, "--run-dir", r], root.path()));
        evals.push(mean_dsc(&ok(panseg(&["evaluate", "--config", c, "--dataset", d, "--run-dir", r], root.path()))));
        let echoed = RunConfig::load(&run.join("finetune/config.txt")).unwrap();
        assert_eq!(echoed.command, "finetune");
        assert_eq!(echoed.seed, 3);
    }
    for stage in ["pretrain", "finetune"] {
        let a = fs::read(runs[0].join(stage).join("model.ckpt")).unwrap();
        let b = fs::read(runs[1].join(stage).join("model.ckpt")).unwrap();
        assert!(a == b, "{stage} checkpoints differ");
    }
    assert_eq!(evals[0], evals[1]);

    // finetuned checkpoint: stored flags are exactly the PEFT groups
    let r = runs[0].to_str().unwrap();
    let report = ok(panseg(&["report-params", "--config", c, "--run-dir", r], root.path()));
    let field = |name: &str| report.lines().find_map(|l| l.strip_prefix(&format!("{name} "))).unwrap().to_string();
    assert_eq!(field("trainable_params"), field("peft_trainable_params"));
    assert_eq!(field("trainable_fraction"), field("peft_trainable_fraction"));
    assert!(report.contains("21.04 M"));
    assert!(report.lines().any(|l| l.starts_with("group backbone.stem ") && l.ends_with("frozen")));

    // frozen-only checkpoint
    let ck = Checkpoint::load(&runs[0].join("finetune/model.ckpt")).unwrap();
    let frozen = Checkpoint { entries: ck.entries.into_iter().map(|e| panseg::train::checkpoint::Entry { trainable: false, ..e }).collect() };
    let fpath = root.path().join("frozen.ckpt");
    frozen.save(&fpath).unwrap();
    let report = ok(panseg(&["report-params", "--config", c, "--run-dir", r, "--checkpoint", fpath.to_str().unwrap()], root.path()));
    assert!(report.contains("trainable_params 0\n"), "{report}");
}

#[test]
fn ablate_emits_five_rows_per_seed_and_a_plain_all_off_row() {
    let root = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(root.path(), "pretrain_epochs = 1\nfinetune_epochs = 1\nseed = 2\n");
    let c = cfg_path.to_str().unwrap();
    let ds = root.path().join("ds");
    let d = ds.to_str().unwrap();
    ok(panseg(&["generate", "--config", c, "--cases", "10", "--dataset", d], root.path()));
    let run = root.path().join("run");
    let r = run.to_str().unwrap();
    let out = ok(panseg(&["ablate", "--config", c, "--dataset", d, "--run-dir", r, "--seeds", "2"], root.path()));
    assert!(out.contains("68.71"));
    let csv = fs::read_to_string(run.join("ablate/ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 5 * 2);
    assert!(csv.lines().next().unwrap().ends_with("dsc_class1,dsc_class2,dsc_class3,mean_dsc"));
    for seed in [2, 3] {
        assert!(run.join(format!("ablate/seed_{seed}/pretrain_ap0_tp0_metrics.csv")).is_file());
    }

    // all-off equals a plain backbone pretrained alone with the same seed
    let plain = root.path().join("plain");
    let p = plain.to_str().unwrap();
    let flags = ["--config", c, "--dataset", d, "--run-dir", p, "--no-use-ap", "--no-use-tp", "--no-use-dmoe"];
    ok(panseg(&[&["pretrain"][..], &flags[..]].concat(), root.path()));
    let ck = plain.join("pretrain/model.ckpt");
    let eval = ok(panseg(&[&["evaluate"][..], &flags[..], &["--checkpoint", ck.to_str().unwrap()][..]].concat(), root.path()));
    let none_row = rows.iter().find(|l| l.starts_with("2,none,")).unwrap();
    let none_mean: f64 = none_row.rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(format!("{none_mean:.6}"), format!("{:.6}", mean_dsc(&eval)));
    let ablated = Checkpoint::load(&run.join("ablate/seed_2/pretrain_ap0_tp0.ckpt")).unwrap().without_groups(|g| g.starts_with("dmoe."));
    assert!(ablated.to_bytes() == Checkpoint::load(&ck).unwrap().to_bytes());
}
