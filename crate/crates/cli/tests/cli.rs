use std::path::Path;
use std::process::{Command, Output};

use neighborwise::bench::ExperimentConfig;
use neighborwise::classifier::{ClsConfig, ClsSchedule};
use neighborwise::data::DatasetSpec;
use neighborwise::neighbor::{AEConfig, PretrainSchedule, RefineSchedule};
use neighborwise::optim::StepDecay;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neighborwise")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let mut c = ExperimentConfig::desk();
    c.dataset = DatasetSpec { side: 16, train_samples: 56, test_samples: 70, sequence_groups: 14, identities: 12, ..Default::default() };
    c.classifier = ClsConfig {
        side: 16,
        full_widths: vec![4, 8],
        half_widths: vec![4, 6],
        full_conv5: 8,
        half_conv5: 6,
        full_embedding: 8,
        half_embedding: 6,
        ..Default::default()
    };
    c.autoencoder = AEConfig {
        side: 16,
        encoder_widths: vec![4, 6],
        latent: 8,
        alpha: vec![4.0, 1.0, 1.0],
        decoder_res_blocks: vec![1, 1, 1],
        decoder_top_width: 4,
        ..Default::default()
    };
    c.schedule = ClsSchedule { epochs: 1, batch_size: 14, lr: StepDecay { initial: 1e-3, factor: 0.1, every: 10 }, ..Default::default() };
    c.pretrain = PretrainSchedule { epochs: 1, batch_size: 14, ..Default::default() };
    c.refine = RefineSchedule { epochs: 1, batch_size: 14, critic_widths: [4, 4, 4], ..Default::default() };
    c.seeds = vec![0];
    let path = dir.join("tiny.json");
    c.save(&path).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn config_presets_print_valid_json() {
    for preset in ["desk", "full"] {
        let text = ok(&["config", "--preset", preset]);
        let c: ExperimentConfig = serde_json::from_str(&text).unwrap();
        c.validate().unwrap();
    }
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&ok(&["config"])).unwrap();
    v["schedule"]["warp"] = serde_json::json!(9);
    let path = dir.path().join("bad.json");
    std::fs::write(&path, v.to_string()).unwrap();
    let out = run(&["gen-data", "--config", path.to_str().unwrap(), "--out", dir.path().join("d").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warp"));
}

#[test]
fn full_pipeline_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let cfg = tiny_config(dir.path());

    ok(&["gen-data", "--config", &cfg, "--out", &p("data")]);
    assert!(dir.path().join("data/manifest.json").exists());
    let common = ["--config", cfg.as_str(), "--data", &p("data")];

    let stdout = ok(&[&["train-cls"][..], &common, &["--out", &p("cls")]].concat());
    assert!(stdout.contains("test accuracy"));
    ok(&[&["eval"][..], &common, &["--out", &p("eval"), "--classifier", &p("cls/classifier.ckpt")]].concat());
    let eval: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p("eval/eval.json")).unwrap()).unwrap();
    let acc = eval["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(eval["sequences"]["cfc"].as_u64().unwrap() <= eval["sequences"]["fc"].as_u64().unwrap());

    ok(&[&["train-ae"][..], &common, &["--out", &p("ae")]].concat());
    let stdout = ok(&[&["refine-ae"][..], &common, &["--out", &p("ae"), "--ae", &p("ae/ae-pretrained.ckpt"), "--classifier", &p("cls/classifier.ckpt")]].concat());
    assert!(stdout.contains("perceptual loss"));
    assert!(std::fs::read(p("ae/neighbors.pgm")).unwrap().starts_with(b"P5\n"));

    ok(&[&["train-masked"][..], &common, &["--out", &p("bt"), "--ae", &p("ae/ae-refined.ckpt")]].concat());
    let csv = std::fs::read_to_string(p("bt/iterations.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 56);
    assert!(dir.path().join("bt/mask-audit.json").exists());

    let out = run(&[&["train-masked"][..], &common, &["--out", &p("x"), "--ae", &p("ae/ae-refined.ckpt"), "--arm", "w/o Ours"]].concat());
    assert!(!out.status.success());
}

#[test]
fn bench_writes_reports_and_means() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("bench");
    let stdout = ok(&["bench", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(stdout.lines().count(), 3);
    assert!(stdout.contains("with Ours(BT)"));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
}
