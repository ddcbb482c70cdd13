use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use zeus_cli::{CorpusManifest, MANIFEST_FILE};
use zeus_core::checkpoint::Checkpoint;
use zeus_core::config::RunConfig;
use zeus_core::dataset::{ColumnKind, LabeledDataset, Provenance};
use zeus_core::encoder::EncoderConfig;
use zeus_core::tensor::Tensor;

fn zeus(args: &[&str], paths: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_zeus"));
    cmd.args(args);
    for (flag, p) in paths {
        cmd.arg(flag).arg(p);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tiny_config(dir: &Path, total_steps: u64) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.encoder = EncoderConfig {
        input_dim: 30,
        token_dim: 8,
        n_blocks: 1,
        n_heads: 2,
        mlp_ratio: 2,
        repr_dim: 4,
    };
    cfg.prior.max_numeric_dim = 5;
    cfg.prior.samples_per_component_range = [20, 50];
    cfg.train.total_steps = total_steps;
    cfg.train.warmup_steps = 0;
    cfg.train.eval_every = 1;
    cfg.train.val_per_kind = 2;
    cfg.eval.kmeans_n_init = 3;
    cfg.eval.gmm_n_init = 2;
    let path = dir.join(format!("cfg{total_steps}.json"));
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn trained_model(dir: &Path) -> PathBuf {
    let cfg = tiny_config(dir, 2);
    let model = dir.join("m.zeus");
    ok(&zeus(&["pretrain"], &[("--config", &cfg), ("--out", &model)]));
    model
}

fn generated(dir: &Path, count: &str) -> PathBuf {
    let cfg = tiny_config(dir, 1);
    let data = dir.join("data");
    ok(&zeus(&["generate", "--count", count, "--seed", "5"], &[("--config", &cfg), ("--out", &data)]));
    data
}

#[test]
fn generate_zero_count_writes_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = generated(dir.path(), "0");
    let m: CorpusManifest = serde_json::from_str(&fs::read_to_string(data.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert!(m.datasets.is_empty());
}

#[test]
fn generate_is_reproducible_and_listed_in_manifest() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = generated(a.path(), "3");
    let db = generated(b.path(), "3");
    let m: CorpusManifest = serde_json::from_str(&fs::read_to_string(da.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(m.datasets.len(), 3);
    for e in &m.datasets {
        for ext in ["csv", "json"] {
            let f = format!("{}.{ext}", e.name);
            assert_eq!(fs::read(da.join(&f)).unwrap(), fs::read(db.join(&f)).unwrap());
        }
        let ds = LabeledDataset::load(&da.join(format!("{}.csv", e.name)), &da.join(format!("{}.json", e.name))).unwrap();
        assert_eq!(ds.seed, Some(e.seed));
        assert_eq!((ds.k, ds.n()), (e.k, e.n));
    }
}

#[test]
fn pretrain_logs_parseable_lines_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.zeus");
    let cfg1 = tiny_config(dir.path(), 1);
    let out = ok(&zeus(&["pretrain"], &[("--config", &cfg1), ("--out", &model)]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2, "evaluations at steps 0 and 1: {out}");
    for line in &lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 4);
        fields[0].parse::<u64>().unwrap();
        for f in &fields[1..] {
            assert!(f.parse::<f64>().unwrap().is_finite());
        }
    }
    let first = Checkpoint::load(&model).unwrap();
    assert_eq!(first.state.step, 1);

    let cfg3 = tiny_config(dir.path(), 3);
    let resumed = dir.path().join("r.zeus");
    ok(&zeus(&["pretrain"], &[("--config", &cfg3), ("--resume", &model), ("--out", &resumed)]));
    let ck = Checkpoint::load(&resumed).unwrap();
    assert_eq!(ck.state.step, 3);
    assert_eq!(ck.state.stream_position, 3);
    let steps: Vec<u64> = ck.state.history.iter().map(|h| h.step).collect();
    assert_eq!(steps, [0, 1, 2, 3]);
}

#[test]
fn resuming_continues_the_same_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 3);
    let straight = dir.path().join("straight.zeus");
    ok(&zeus(&["pretrain"], &[("--config", &cfg), ("--out", &straight)]));
    let half = dir.path().join("half.zeus");
    ok(&zeus(&["pretrain", "--until", "1"], &[("--config", &cfg), ("--out", &half)]));
    assert_eq!(Checkpoint::load(&half).unwrap().state.step, 1);
    let resumed = dir.path().join("resumed.zeus");
    ok(&zeus(&["pretrain"], &[("--resume", &half), ("--out", &resumed)]));
    let a = Checkpoint::load(&straight).unwrap();
    let b = Checkpoint::load(&resumed).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(fs::read(&straight).unwrap(), fs::read(&resumed).unwrap());
}

#[test]
fn embed_cluster_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = generated(dir.path(), "1");
    let model = trained_model(dir.path());
    let input = data.join("syn_0000.csv");
    let meta = data.join("syn_0000.json");
    let ds = LabeledDataset::load(&input, &meta).unwrap();

    let z = dir.path().join("z.csv");
    ok(&zeus(&["embed"], &[("--model", &model), ("--input", &input), ("--meta", &meta), ("--out", &z)]));
    let text = fs::read_to_string(&z).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "z0,z1,z2,z3");
    assert_eq!(lines.count(), ds.n());

    let soft = dir.path().join("soft.csv");
    ok(&zeus(
        &["cluster", "--method", "gmm"],
        &[("--model", &model), ("--input", &input), ("--meta", &meta), ("--out", &soft)],
    ));
    let text = fs::read_to_string(&soft).unwrap();
    for line in text.lines().skip(1) {
        let total: f64 = line.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
    let scores = ok(&zeus(&["eval"], &[("--pred", &soft), ("--labels", &input)]));
    let v: serde_json::Value = serde_json::from_str(&scores).unwrap();
    assert!(v["ari"].as_f64().unwrap() <= 100.0);

    // Ground truth scored against itself.
    let truth = dir.path().join("truth.csv");
    let mut body = String::from("row_index,label\n");
    for (i, y) in ds.y.iter().enumerate() {
        body.push_str(&format!("{i},{y}\n"));
    }
    fs::write(&truth, body).unwrap();
    let scores = ok(&zeus(&["eval"], &[("--pred", &truth), ("--labels", &input)]));
    let v: serde_json::Value = serde_json::from_str(&scores).unwrap();
    assert_eq!(v["ari"].as_f64().unwrap(), 100.0);
    assert_eq!(v["brier"].as_f64().unwrap(), 0.0);
}

#[test]
fn wide_tables_are_reduced_before_embedding() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained_model(dir.path());
    let ds = LabeledDataset {
        x: Tensor::from_fn(40, 76, |i, j| ((i * 31 + j * 17) % 23) as f64 / 7.0 + (i % 2) as f64),
        y: (0..40).map(|i| i % 2).collect(),
        column_kinds: vec![ColumnKind::Numeric; 76],
        k: 2,
        provenance: Provenance::External,
        seed: None,
    };
    ds.save(dir.path(), "wide").unwrap();
    let out = dir.path().join("z.csv");
    ok(&zeus(
        &["embed"],
        &[
            ("--model", &model),
            ("--input", &dir.path().join("wide.csv")),
            ("--meta", &dir.path().join("wide.json")),
            ("--out", &out),
        ],
    ));
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 41);
}

#[test]
fn bench_report_has_four_methods_and_summary_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = generated(dir.path(), "3");
    let model = trained_model(dir.path());
    let out = dir.path().join("bench");
    ok(&zeus(&["bench"], &[("--model", &model), ("--data", &data), ("--out", &out)]));
    for file in ["ari.csv", "brier.csv"] {
        let text = fs::read_to_string(out.join(file)).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows[0], "dataset,kmeans,gmm,zeus-kmeans,zeus-gmm");
        let labels: Vec<&str> = rows[4..].iter().map(|r| r.split(',').next().unwrap()).collect();
        assert_eq!(labels, ["Mean", "Mean-Rank", "Top-3", "Top-1"]);
    }
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let code = |o: Output| o.status.code().unwrap();

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"lr_peek": 1.0}}"#).unwrap();
    let target = dir.path().join("never");
    assert_eq!(code(zeus(&["generate", "--count", "1"], &[("--config", &bad), ("--out", &target)])), 2);
    assert!(!target.exists(), "config is validated before any work");

    fs::write(&bad, r#"{"train": {"warmup_steps": 10, "total_steps": 5}}"#).unwrap();
    assert_eq!(code(zeus(&["pretrain"], &[("--config", &bad), ("--out", &target)])), 2);

    assert_eq!(code(zeus(&["frobnicate"], &[])), 2);

    let missing = dir.path().join("missing.zeus");
    let data = generated(dir.path(), "1");
    let input = data.join("syn_0000.csv");
    let meta = data.join("syn_0000.json");
    let out = dir.path().join("o.csv");
    assert_eq!(
        code(zeus(&["embed"], &[("--model", &missing), ("--input", &input), ("--meta", &meta), ("--out", &out)])),
        4
    );

    let model = trained_model(dir.path());
    let wrong_meta = dir.path().join("wrong.json");
    fs::write(&wrong_meta, r#"{"column_kinds": ["numeric"], "K": 2, "provenance": "external", "seed": null}"#).unwrap();
    assert_eq!(
        code(zeus(&["embed"], &[("--model", &model), ("--input", &input), ("--meta", &wrong_meta), ("--out", &out)])),
        2
    );

    let three = dir.path().join("three.csv");
    let n = fs::read_to_string(&input).unwrap().lines().count() - 1;
    let mut body = String::from("row_index,p_0,p_1,p_2,p_3,p_4,p_5,p_6,p_7,p_8,p_9,p_10\n");
    for i in 0..n {
        body.push_str(&format!("{i},1,0,0,0,0,0,0,0,0,0,0\n"));
    }
    fs::write(&three, body).unwrap();
    assert_eq!(code(zeus(&["eval"], &[("--pred", &three), ("--labels", &input)])), 2);
}
