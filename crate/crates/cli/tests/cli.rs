use std::path::Path;
use std::process::{Command, Output};

use p2c_core::dataio::load_dataset;
use p2c_core::model::ModelState;
use p2c_core::prefsources::load_pairs;
use p2c_core::trainer::evaluate_split;
use serde_json::Value;

fn p2c(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_p2c")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = p2c(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_CONFIG: &str = r#"{"epochs": 2, "emb_dim": 8, "hidden_dim": 8, "pref_hidden": 8,
    "features": {"ngram_orders": [1], "bucket_count": 1024, "max_tokens": 64, "hash_seed": 0}}"#;

/// Writes a small synthetic dataset and training config into `dir`.
fn fixture(dir: &Path) -> (String, String) {
    let data = dir.join("data.jsonl");
    let config = dir.join("config.json");
    std::fs::write(&config, SMALL_CONFIG).unwrap();
    ok(&["synth", "--out", s(&data), "--examples-per-class", "50", "--seed", "3"]);
    (s(&data).to_owned(), s(&config).to_owned())
}

#[test]
fn unknown_subcommand_exits_one_with_usage() {
    let out = p2c(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(p2c(&["--help"]).status.code(), Some(0));
    assert_eq!(p2c(&["train"]).status.code(), Some(1));
}

#[test]
fn train_writes_checkpoint_and_history_and_eval_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = fixture(dir.path());
    let out_dir = dir.path().join("run");
    ok(&["train", "--config", &config, "--method", "vanilla", "--data", &data, "--out", s(&out_dir)]);
    for f in ["model.json", "history.jsonl", "summary.json"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let history = std::fs::read_to_string(out_dir.join("history.jsonl")).unwrap();
    assert!(history.lines().count() > 0);
    assert!(history.lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));

    let ckpt = out_dir.join("model.json");
    let out = ok(&["eval", "--checkpoint", s(&ckpt), "--data", &data, "--split", "test"]);
    let printed: Value = serde_json::from_slice(&out.stdout).unwrap();
    let model = ModelState::load(&ckpt).unwrap();
    let ds = load_dataset(&data).unwrap();
    let expected = evaluate_split(&model, &ds, Some(p2c_core::dataio::Split::Test), 10).unwrap();
    assert_eq!(printed, serde_json::to_value(&expected).unwrap());
    assert_eq!(printed["examples"], 10);
}

#[test]
fn identical_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = fixture(dir.path());
    let pairs = dir.path().join("pairs.jsonl");
    ok(&["build-prefs", "extractive", "--data", &data, "--out", s(&pairs), "--pairs-per-example", "2"]);
    assert!(!load_pairs(&pairs).unwrap().is_empty());
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&["train", "--config", &config, "--method", "p2c", "--seed", "7", "--data", &data, "--pairs", s(&pairs), "--out", s(&out)]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["model.json", "history.jsonl", "summary.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn exit_codes_distinguish_usage_data_and_runtime() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = fixture(dir.path());
    let out = dir.path().join("out");
    // p2c without pairs is a usage problem
    assert_eq!(p2c(&["train", "--config", &config, "--method", "p2c", "--data", &data, "--out", s(&out)]).status.code(), Some(1));
    // a record whose label disagrees with its votes
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"id\":\"a\",\"text\":\"t\",\"label\":1,\"votes\":[4,1]}\n").unwrap();
    assert_eq!(p2c(&["train", "--data", s(&bad), "--out", s(&out)]).status.code(), Some(2));
    // a missing input file is a runtime failure
    let missing = dir.path().join("missing.jsonl");
    assert_eq!(p2c(&["train", "--data", s(&missing), "--out", s(&out)]).status.code(), Some(3));
    // an unknown config field
    let cfg = dir.path().join("typo.json");
    std::fs::write(&cfg, r#"{"epoch": 3}"#).unwrap();
    assert_eq!(p2c(&["train", "--config", s(&cfg), "--data", &data, "--out", s(&out)]).status.code(), Some(1));
}

#[test]
fn simulated_rounds_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = fixture(dir.path());
    let out = dir.path().join("rounds");
    let args =
        ["rounds", "--data", &data, "--config", &config, "--out", s(&out), "--schedule", "10,10", "--simulate", "3"];
    ok(&args);
    let pairs = load_pairs(out.join("pairs.jsonl")).unwrap();
    assert_eq!(pairs.len(), 20);
    let round0 = load_pairs(out.join("pairs-round-0.jsonl")).unwrap();
    assert_eq!(round0.len(), 10);
    assert!(out.join("model.json").exists());
    // completed rounds are reused on a rerun
    ok(&args);
    assert_eq!(load_pairs(out.join("pairs.jsonl")).unwrap(), pairs);

    let extractive = dir.path().join("ext.jsonl");
    ok(&["build-prefs", "extractive", "--data", &data, "--out", s(&extractive)]);
    let rep = ok(&["report", "--pairs", s(&extractive), "--pairs", s(&out.join("pairs.jsonl"))]);
    let rep: Value = serde_json::from_slice(&rep.stdout).unwrap();
    assert_eq!(rep["sources"][1]["pairs"], 20);
    assert!(rep["comparisons"][0]["agreement"]["shared"].is_u64());
    assert_eq!(p2c(&["report", "--pairs", s(&extractive)]).status.code(), Some(1));
}
