use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use guided_grpo::parser::render_tool_calls;
use guided_grpo::toy::{toy_bundle, TOY_SEED};
use serde_json::Value;
use tempfile::TempDir;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_guided-grpo")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A toy bundle in a temp dir with the round count cut down.
fn toy_dir(rounds: usize) -> TempDir {
    let dir = TempDir::new().unwrap();
    ok(&["generate-toy", "--out", p(dir.path())]);
    let path = dir.path().join("config.json");
    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    cfg["rounds"] = rounds.into();
    fs::write(&path, cfg.to_string()).unwrap();
    dir
}

#[test]
fn generate_toy_writes_the_bundle() {
    let dir = TempDir::new().unwrap();
    ok(&["generate-toy", "--out", p(dir.path())]);
    for (name, text) in toy_bundle(TOY_SEED).files() {
        assert_eq!(fs::read_to_string(dir.path().join(name)).unwrap(), text);
    }
}

#[test]
fn training_artifacts_do_not_depend_on_workers() {
    let dir = toy_dir(2);
    let config = dir.path().join("config.json");
    let mut runs = Vec::new();
    for workers in ["1", "4"] {
        let out = dir.path().join(format!("out-{workers}"));
        let stdout = ok(&["train", "--config", p(&config), "--output-dir", p(&out), "--workers", workers]);
        let summary: Value = serde_json::from_str(&stdout).unwrap();
        assert_eq!(summary["rounds"], 2);
        let files: Vec<Vec<u8>> = ["metrics.csv", "checkpoint.json", "hard_samples.json", "summary.json"]
            .iter()
            .map(|f| fs::read(out.join(f)).unwrap())
            .collect();
        runs.push(files);
    }
    assert_eq!(runs[0], runs[1]);
    let csv = String::from_utf8(runs[0][0].clone()).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn strategy_flag_overrides_the_config() {
    let dir = toy_dir(1);
    let out = dir.path().join("out");
    let stdout = ok(&[
        "train",
        "--config",
        p(&dir.path().join("config.json")),
        "--output-dir",
        p(&out),
        "--strategy",
        "drop-hard",
    ]);
    let summary: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(summary["strategy"], "drop_hard");
}

#[test]
fn classify_hard_lists_the_hopeless_samples() {
    let dir = toy_dir(1);
    let bundle = toy_bundle(TOY_SEED);
    let stdout = ok(&[
        "classify-hard",
        "--checkpoint",
        p(&dir.path().join("checkpoint.json")),
        "--dataset",
        p(&dir.path().join("dataset.jsonl")),
        "--rollouts",
        "10",
    ]);
    let report: Value = serde_json::from_str(&stdout).unwrap();
    let ids: Vec<&str> = report["hard_ids"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(report["hard_count"], ids.len());
    // at p = 1e-5 a sample is essentially never solved in 10 tries
    for (id, p) in &bundle.success {
        if *p < 1e-3 {
            assert!(ids.contains(&id.as_str()), "{id} should be hard");
        }
        if *p >= 0.5 {
            assert!(!ids.contains(&id.as_str()), "{id} should not be hard");
        }
    }
}

#[test]
fn build_fewshots_random_and_cautious() {
    let dir = toy_dir(1);
    let dataset = dir.path().join("dataset.jsonl");
    let random = dir.path().join("random.jsonl");
    let counts: Value = serde_json::from_str(&ok(&["build-fewshots", "--mode", "random", "--dataset", p(&dataset), "--out", p(&random)])).unwrap();
    // the 40 samples with a private tool get nothing
    assert_eq!(counts["without_fewshot"], 40);
    assert!(random.is_file());

    let cautious = dir.path().join("cautious.jsonl");
    let args = ["build-fewshots", "--mode", "cautious", "--dataset", p(&dataset), "--out", p(&cautious)];
    assert_eq!(cli(&args).status.code(), Some(1), "vetting without a checkpoint is a config error");
    let checkpoint = dir.path().join("checkpoint.json");
    let mut with_ckpt = args.to_vec();
    with_ckpt.extend(["--checkpoint", p(&checkpoint)]);
    let counts: Value = serde_json::from_str(&ok(&with_ckpt)).unwrap();
    assert_eq!(counts["total"], 200);
    assert!(counts["with_fewshot"].as_u64().unwrap() >= 60);
}

#[test]
fn score_emits_one_record_per_line() {
    let dir = toy_dir(1);
    let bundle = toy_bundle(TOY_SEED);
    let sample = &bundle.dataset.samples()[0];
    let good = format!("<think>easy</think>\n<tool_call>{}</tool_call>", render_tool_calls(&sample.base.ground_truth));
    let input = dir.path().join("responses.jsonl");
    let lines = [
        serde_json::json!({"sample_id": sample.id(), "text": good}).to_string(),
        String::new(),
        serde_json::json!({"sample_id": sample.id(), "text": "no tags at all"}).to_string(),
    ];
    fs::write(&input, lines.join("\n")).unwrap();
    let dataset = dir.path().join("dataset.jsonl");
    let stdout = ok(&["score", "--input", p(&input), "--dataset", p(&dataset)]);
    let rows: Vec<Value> = stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["value"], 1.0);
    assert_eq!(rows[0]["format_ok"], true);
    assert_eq!(rows[1]["value"], 0.0);
    assert_eq!(rows[1]["format_ok"], false);

    fs::write(&input, r#"{"sample_id": "nope", "text": ""}"#).unwrap();
    assert_eq!(cli(&["score", "--input", p(&input), "--dataset", p(&dataset)]).status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.json");
    assert_eq!(cli(&["train", "--config", p(&missing)]).status.code(), Some(1));
    assert_eq!(cli(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(cli(&["--help"]).status.code(), Some(0));

    let bad_cfg = dir.path().join("bad.json");
    fs::write(&bad_cfg, r#"{"group_size": 1}"#).unwrap();
    assert_eq!(cli(&["train", "--config", p(&bad_cfg)]).status.code(), Some(1));

    let bad_data = dir.path().join("bad.jsonl");
    fs::write(&bad_data, "{not json}\n").unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, format!(r#"{{"dataset_path": "{}"}}"#, p(&bad_data))).unwrap();
    assert_eq!(cli(&["train", "--config", p(&cfg)]).status.code(), Some(2));
    let out = dir.path().join("x.jsonl");
    assert_eq!(cli(&["build-fewshots", "--mode", "random", "--dataset", p(&bad_data), "--out", p(&out)]).status.code(), Some(2));
}
