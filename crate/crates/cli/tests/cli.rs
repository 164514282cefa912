use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Proc;

use clap::Parser;
use gvs_cli::commands::{dedup_lambdas, summarize, REPORT_FILE};
use gvs_cli::config::{RunConfig, RESOLVED_FILE};
use gvs_cli::{execute, run_cli, to_run, Cli};
use gvs_core::data::container::load_grid;
use gvs_core::{GeneratorSpec, GvsTrainer, MetricReport, OutputActivation, SegmentorSpec, TrainConfig};
use serde_json::Value;
use tempfile::TempDir;

fn cli(args: &[&str]) -> gvs_core::Result<Value> {
    run_cli(&Cli::try_parse_from(std::iter::once("gvs").chain(args.iter().copied())).expect("args parse"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--set", "epochs=1",
    "--set", "batch_size=4",
    "--set", "generator.base_channels=2",
    "--set", "generator.downsamplings=1",
    "--set", "generator.residual_blocks=1",
    "--set", "segmentor.depth=1",
    "--set", "segmentor.base_channels=2",
    "--set", "segmentor.convs_per_level=1",
];

fn phantoms(dir: &Path, count: usize) -> PathBuf {
    let out = dir.join("data");
    let count = format!("phantom.count={count}");
    cli(&[
        "phantom-gen", "--out", p(&out), "--seed", "3",
        "--set", "phantom.height=32", "--set", "phantom.width=32",
        "--set", &count, "--set", "test_fraction=0.25",
    ])
    .unwrap();
    out.join("manifest.json")
}

fn train_tiny(dir: &Path, data: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["train", "--data", p(data), "--out", p(&out)];
    args.extend_from_slice(TINY);
    cli(&args).unwrap();
    out
}

/// Generator that returns its input exactly: additive residual head with a
/// zeroed head conv and a hard clamp.
fn identity_checkpoint(dir: &Path) -> PathBuf {
    let cfg = TrainConfig {
        generator: GeneratorSpec {
            base_channels: 2,
            downsamplings: 1,
            residual_blocks: 1,
            residual_head: true,
            output: OutputActivation::Clamp,
            ..GeneratorSpec::default()
        },
        segmentor: SegmentorSpec {
            depth: 1,
            base_channels: 2,
            convs_per_level: 1,
            ..SegmentorSpec::default()
        },
        ..TrainConfig::default()
    };
    let mut t = GvsTrainer::new(cfg).unwrap();
    for name in ["head.weight", "head.bias"] {
        let idx = t.state.g.index_of(name).unwrap();
        t.state.g.value_mut(idx).unwrap().scale(0.0);
    }
    let path = dir.join("identity.ckpt");
    t.to_checkpoint().unwrap().save(&path).unwrap();
    path
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn every_run_writes_resolved_config() {
    let dir = TempDir::new().unwrap();
    let data = phantoms(dir.path(), 8);
    let run: RunConfig = serde_json::from_slice(&read(&data.parent().unwrap().join(RESOLVED_FILE))).unwrap();
    assert_eq!(run.subcommand, "phantom-gen");
    assert_eq!(run.seed, Some(3));
    assert_eq!(run.config["phantom"]["height"], 32);
    assert_eq!(run.config_hash, run.compute_hash().unwrap());
}

#[test]
fn config_hash_stable_under_key_reordering() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    fs::write(&a, r#"{"lambda": 5, "generator": {"base_channels": 4, "residual_blocks": 1}, "epochs": 2}"#).unwrap();
    fs::write(&b, r#"{"epochs": 2, "generator": {"residual_blocks": 1, "base_channels": 4}, "lambda": 5}"#).unwrap();
    let data = phantoms(dir.path(), 4);
    let ra = to_run(&Cli::parse_from(["gvs", "train", "--data", p(&data), "--out", "x", "--config", p(&a)]).command).unwrap();
    let rb = to_run(&Cli::parse_from(["gvs", "train", "--data", p(&data), "--out", "y", "--config", p(&b)]).command).unwrap();
    assert_eq!(ra.config_hash, rb.config_hash);
    let rc = to_run(&Cli::parse_from(["gvs", "train", "--data", p(&data), "--out", "y", "--config", p(&b), "--set", "lambda=6"]).command).unwrap();
    assert_ne!(ra.config_hash, rc.config_hash);
}

#[test]
fn synthesize_counts_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let data = phantoms(dir.path(), 8);
    let run = train_tiny(dir.path(), &data, "train");
    let ckpt = run.join("generator.ckpt");
    let s1 = dir.path().join("s1");
    let s2 = dir.path().join("s2");
    for out in [&s1, &s2] {
        let r = cli(&["synthesize", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(out)]).unwrap();
        assert_eq!(r["count"], 8);
    }
    let index = String::from_utf8(read(&s1.join("index.csv"))).unwrap();
    assert_eq!(index.lines().count(), 1 + 8);
    for line in index.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        for rel in &cols[1..3] {
            assert_eq!(read(&s1.join(rel)), read(&s2.join(rel)), "{rel}");
        }
    }
}

#[test]
fn identity_generator_gives_zero_difference_maps() {
    let dir = TempDir::new().unwrap();
    let data = phantoms(dir.path(), 4);
    let ckpt = identity_checkpoint(dir.path());
    let out = dir.path().join("synth");
    cli(&["synthesize", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&out)]).unwrap();
    let index = String::from_utf8(read(&out.join("index.csv"))).unwrap();
    for line in index.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[3].parse::<f64>().unwrap(), 0.0);
        let diff = load_grid(&out.join(cols[2])).unwrap();
        assert!(diff.pixels().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn train_then_evaluate_and_report() {
    let dir = TempDir::new().unwrap();
    let data = phantoms(dir.path(), 8);
    let run = train_tiny(dir.path(), &data, "train");
    let ckpt = run.join("generator.ckpt");
    let losses = String::from_utf8(read(&run.join("losses.csv"))).unwrap();
    // 6 train samples at batch 4: two steps
    assert_eq!(losses.lines().count(), 3);

    let ident = dir.path().join("ident");
    let r = cli(&["eval-identity", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&ident)]).unwrap();
    assert!(r["mpsnr"].as_f64().unwrap() > 0.0);

    let adice = dir.path().join("adice");
    let tiny_adice = [
        "--set", "adice.epochs=2", "--set", "adice.batch_size=4",
        "--set", "adice.segmentor.depth=1", "--set", "adice.segmentor.base_channels=2",
        "--set", "adice.segmentor.convs_per_level=1",
    ];
    let mut args = vec!["eval-adice", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&adice)];
    args.extend_from_slice(&tiny_adice);
    let r = cli(&args).unwrap();
    assert_eq!(r["per_repeat"].as_array().unwrap().len(), 3);

    let missing = dir.path().join("nothing-here");
    let summary = dir.path().join("summary");
    let r = cli(&["report", p(&ident), p(&adice), p(&missing), "--out", p(&summary)]).unwrap();
    let rows = r["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0]["status"], "ok");
    assert!(rows[2]["status"].as_str().unwrap().starts_with("missing"));
    assert!(fs::read_to_string(summary.join("summary.md")).unwrap().contains("±"));
}

#[test]
fn enhance_alpha_zero_copies_inputs() {
    let dir = TempDir::new().unwrap();
    let data = phantoms(dir.path(), 4);
    let ckpt = identity_checkpoint(dir.path());
    let out = dir.path().join("enh");
    cli(&["enhance", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&out), "--set", "alpha=0"]).unwrap();
    let root = data.parent().unwrap();
    for i in 0..4 {
        let name = format!("phantom-3-{i:04}.png");
        let src = load_grid(&root.join("images").join(&name)).unwrap();
        assert!(load_grid(&out.join("enhanced").join(&name)).unwrap().bit_eq(&src));
    }
}

#[test]
fn report_single_run_passthrough_and_repeat_stats() {
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("run");
    fs::create_dir_all(&run).unwrap();
    let rep = MetricReport {
        mpsnr: Some(30.5),
        mssim: Some(0.95),
        adice: Some(0.51),
        adice_repeats: vec![0.50, 0.52, 0.51],
        config_hash: "abc".into(),
        ..MetricReport::default()
    };
    fs::write(run.join(REPORT_FILE), serde_json::to_vec(&rep).unwrap()).unwrap();
    let row = summarize(&run);
    assert_eq!(row.mpsnr, Some(30.5));
    assert_eq!(row.mssim, Some(0.95));
    assert!((row.adice_mean.unwrap() - 0.51).abs() < 1e-12);
    assert!((row.adice_std.unwrap() - 0.01).abs() < 1e-12);
    assert_eq!(row.repeats, 3);
}

#[test]
fn report_without_runs_fails() {
    let dir = TempDir::new().unwrap();
    let err = cli(&["report", "--out", p(dir.path())]).unwrap_err();
    assert_eq!(err.kind(), "invalid-input");
}

#[test]
fn duplicate_lambdas_are_dropped_with_warning() {
    let (kept, warnings) = dedup_lambdas(&[5.0, 10.0, 5.0, 20.0, 10.0]);
    assert_eq!(kept, vec![5.0, 10.0, 20.0]);
    assert_eq!(warnings.len(), 2);
}

#[test]
fn sweep_with_single_lambda_has_one_row() {
    let dir = TempDir::new().unwrap();
    let data = phantoms(dir.path(), 8);
    let out = dir.path().join("sweep");
    let mut args = vec!["sweep-lambda", "--data", p(&data), "--out", p(&out), "--set", "lambdas=[10, 10]"];
    let train_sets: Vec<String> = TINY.chunks(2).map(|kv| format!("train.{}", kv[1])).collect();
    for s in &train_sets {
        args.extend_from_slice(&["--set", s]);
    }
    args.extend_from_slice(&[
        "--set", "adice.epochs=1", "--set", "adice.repeats=1",
        "--set", "adice.segmentor.depth=1", "--set", "adice.segmentor.base_channels=2",
        "--set", "adice.segmentor.convs_per_level=1",
    ]);
    let r = cli(&args).unwrap();
    assert_eq!(r["warnings"].as_array().unwrap().len(), 1);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("10,"));
}

#[test]
fn replay_reproduces_outputs() {
    let dir = TempDir::new().unwrap();
    let data = phantoms(dir.path(), 8);
    let a = train_tiny(dir.path(), &data, "a");
    let b = dir.path().join("b");
    let replay = RunConfig::load(&a.join(RESOLVED_FILE)).unwrap();
    let replay = RunConfig { out: b.clone(), ..replay };
    execute(&replay).unwrap();
    assert_eq!(read(&a.join("losses.csv")), read(&b.join("losses.csv")));
    assert_eq!(read(&a.join("generator.ckpt")), read(&b.join("generator.ckpt")));
}

#[test]
fn edited_resolved_config_is_refused() {
    let dir = TempDir::new().unwrap();
    let data = phantoms(dir.path(), 4);
    let path = data.parent().unwrap().join(RESOLVED_FILE);
    let text = fs::read_to_string(&path).unwrap().replace("\"test_fraction\": 0.25", "\"test_fraction\": 0.5");
    fs::write(&path, text).unwrap();
    assert!(RunConfig::load(&path).is_err());
}

#[test]
fn binary_reports_errors_as_json() {
    let dir = TempDir::new().unwrap();
    let out = Proc::new(env!("CARGO_BIN_EXE_gvs"))
        .args(["train", "--data", "/definitely/not/here.json", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let line = String::from_utf8(out.stderr).unwrap();
    let v: Value = serde_json::from_str(line.lines().last().unwrap()).unwrap();
    assert_eq!(v["status"], "error");
    assert_eq!(v["kind"], "io");

    let out = Proc::new(env!("CARGO_BIN_EXE_gvs"))
        .args(["phantom-gen", "--set", "phantom.colour=3", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let v: Value = serde_json::from_str(String::from_utf8(out.stderr).unwrap().lines().last().unwrap()).unwrap();
    assert_eq!(v["kind"], "invalid-config");
}

#[test]
fn binary_prints_ok_summary() {
    let dir = TempDir::new().unwrap();
    let out = Proc::new(env!("CARGO_BIN_EXE_gvs"))
        .env("GVS_LOG", "off")
        .args(["phantom-gen", "--set", "phantom.count=2", "--set", "phantom.height=32", "--set", "phantom.width=32", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["status"], "ok");
    assert!(dir.path().join("manifest.json").exists());
}
