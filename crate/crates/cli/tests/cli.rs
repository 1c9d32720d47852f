use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_multigran"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("binary runs")
}

fn write_config(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({
        "synthetic": {"train_size": 60, "dev_size": 20, "test_size": 10},
        "verifier": {"layers": 2, "sublayers_per_hop": 1, "d_model": 16, "n_heads": 2, "d_ff": 32, "capsule_dim": 8},
        "verifier_training": {"epochs": 2, "target_dev_accuracy": null},
        "explainer_training": {"epochs": 2},
        "explainer_train_size": 10,
        "ig_steps": 16,
        "out": dir.join("run")
    });
    if let (Value::Object(base), Value::Object(more)) = (&mut cfg, extra) {
        for (k, v) in more {
            base.insert(k, v);
        }
    }
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Exit code and the single error line on stderr.
fn failure(out: &Output) -> (i32, String) {
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error ")).collect();
    assert_eq!(lines.len(), 1, "stderr: {err}");
    (out.status.code().unwrap(), lines[0].to_string())
}

#[test]
fn generate_is_reproducible_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({"synthetic": {"train_size": 800, "dev_size": 100, "test_size": 100}}));
    let c = cfg.to_str().unwrap();
    let stdout = ok(&run(&["generate", "--config", c], dir.path()));
    assert!(stdout.contains("train: 800 instances"));
    let data = dir.path().join("run/data");
    let first: Vec<Vec<u8>> =
        ["train", "dev", "test"].iter().map(|s| fs::read(data.join(format!("{s}.jsonl"))).unwrap()).collect();
    for (bytes, n) in first.iter().zip([800, 100, 100]) {
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert_eq!(text.lines().count(), n);
        for line in text.lines() {
            serde_json::from_str::<Value>(line).unwrap();
        }
    }
    ok(&run(&["generate", "--config", c], dir.path()));
    for (s, bytes) in ["train", "dev", "test"].iter().zip(&first) {
        assert_eq!(&fs::read(data.join(format!("{s}.jsonl"))).unwrap(), bytes);
    }
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    let c = cfg.to_str().unwrap();
    let run_dir = dir.path().join("run");
    ok(&run(&["generate", "--config", c], dir.path()));

    let out = ok(&run(&["train-verifier", "--config", c, "--seed", "3"], dir.path()));
    assert_eq!(out.lines().filter(|l| l.starts_with("epoch")).count(), 2);
    let out = ok(&run(&["train-verifier", "--config", c, "--seed", "3", "--resume"], dir.path()));
    let epochs: Vec<&str> = out.lines().filter(|l| l.starts_with("epoch")).collect();
    assert_eq!(epochs.len(), 4);
    assert!(epochs[3].starts_with("epoch   4"));
    let log: Value = serde_json::from_slice(&fs::read(run_dir.join("verifier_log.json")).unwrap()).unwrap();
    assert_eq!(log["epochs"].as_array().unwrap().len(), 4);

    let out = ok(&run(&["train-explainers", "--config", c, "--seed", "3"], dir.path()));
    assert!(out.contains("(unchanged)"));
    let elog: Value = serde_json::from_slice(&fs::read(run_dir.join("explainer_log.json")).unwrap()).unwrap();
    for key in ["fidelity", "consistency", "salience_sentence", "salience_token", "l0"] {
        assert!(elog["epochs"][0]["components"][key].is_number(), "{key}");
    }
    ok(&run(&["train-explainers", "--config", c, "--ablate", "C"], dir.path()));
    assert!(run_dir.join("explainer-no-c.json").exists());

    let out = ok(&run(&["evaluate", "--config", c, "--split", "test"], dir.path()));
    assert!(out.lines().any(|l| l.starts_with("predicted")));
    assert!(out.lines().any(|l| l.starts_with("gold")));
    let header = out.lines().next().unwrap();
    let cols: Vec<&str> = header.split_whitespace().collect();
    assert_eq!(cols, ["partition", "Acc", "F1", "Fidelity", "TRO-R", "TRO-N", "Consistency"]);
    let report: Value = serde_json::from_slice(&fs::read(run_dir.join("metrics-test.json")).unwrap()).unwrap();
    for key in
        ["accuracy", "macro_f1", "fidelity", "tro_r", "tro_n", "consistency", "gold_consistency", "token_spearman"]
    {
        assert!(report.get(key).is_some(), "{key}");
    }
    ok(&run(&["evaluate", "--config", c, "--ablate", "C", "--tau", "0.3"], dir.path()));
    assert!(run_dir.join("metrics-test-no-c.json").exists());

    let out = ok(&run(&["explain", "--config", c, "--limit", "3"], dir.path()));
    assert_eq!(out.lines().filter(|l| l.starts_with('#')).count(), 3);
    let html = fs::read_to_string(run_dir.join("explain-test.html")).unwrap();
    assert_well_formed(&html);

    // verifier-only scores do not depend on which explainer is present
    fs::remove_file(run_dir.join("explainer.json")).unwrap();
    ok(&run(&["train-explainers", "--config", c, "--seed", "8"], dir.path()));
    ok(&run(&["evaluate", "--config", c], dir.path()));
    let again: Value = serde_json::from_slice(&fs::read(run_dir.join("metrics-test.json")).unwrap()).unwrap();
    assert_eq!(again["accuracy"], report["accuracy"]);
    assert_eq!(again["macro_f1"], report["macro_f1"]);
}

fn assert_well_formed(html: &str) {
    use quick_xml::events::Event;
    let mut reader = quick_xml::Reader::from_str(html);
    let mut stack: Vec<Vec<u8>> = Vec::new();
    loop {
        match reader.read_event().expect("well-formed markup") {
            Event::Start(e) => stack.push(e.name().as_ref().to_vec()),
            Event::End(e) => assert_eq!(stack.pop().as_deref(), Some(e.name().as_ref())),
            Event::Eof => break,
            _ => {}
        }
    }
    assert!(stack.is_empty());
}

#[test]
fn errors_are_single_lines_with_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    let c = cfg.to_str().unwrap();

    let (code, line) = failure(&run(&["evaluate", "--config", c, "--tau", "1.5"], dir.path()));
    assert_eq!(code, 2);
    assert!(line.starts_with("error code=2 kind=config:"), "{line}");

    let (code, _) = failure(&run(&["generate", "--config", "missing.json"], dir.path()));
    assert_eq!(code, 2);

    let (code, line) = failure(&run(&["train-explainers", "--ablate", "X", "--config", c], dir.path()));
    assert_eq!(code, 2);
    assert!(line.contains("kind=usage"));

    // no dataset yet
    let (code, _) = failure(&run(&["train-verifier", "--config", c], dir.path()));
    assert_eq!(code, 3);

    ok(&run(&["generate", "--config", c], dir.path()));
    let train = dir.path().join("run/data/train.jsonl");
    let text = fs::read_to_string(&train).unwrap();
    fs::write(&train, text.replacen("\"label\"", "\"lable\"", 1)).unwrap();
    let (code, line) = failure(&run(&["train-verifier", "--config", c], dir.path()));
    assert_eq!(code, 3);
    assert!(line.contains("kind=schema") && line.contains("line 1"), "{line}");
}

#[test]
fn divergence_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({"verifier_training": {"epochs": 2, "lr": 1e300}}));
    let c = cfg.to_str().unwrap();
    ok(&run(&["generate", "--config", c], dir.path()));
    let (code, line) = failure(&run(&["train-verifier", "--config", c], dir.path()));
    assert_eq!(code, 4, "{line}");
    assert!(line.contains("kind=numeric"));
}

#[test]
fn vocabulary_mismatch_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    let c = cfg.to_str().unwrap();
    ok(&run(&["generate", "--config", c], dir.path()));
    ok(&run(&["train-verifier", "--config", c], dir.path()));
    let other = write_config(
        dir.path(),
        json!({"synthetic": {"train_size": 60, "dev_size": 20, "test_size": 10, "vocab_size": 5}}),
    );
    ok(&run(&["generate", "--config", other.to_str().unwrap()], dir.path()));
    let (code, line) = failure(&run(&["train-explainers", "--config", other.to_str().unwrap()], dir.path()));
    assert_eq!(code, 3);
    assert!(line.contains("vocabulary"), "{line}");
}

#[test]
fn explaining_a_malformed_file_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    let c = cfg.to_str().unwrap();
    ok(&run(&["generate", "--config", c], dir.path()));
    ok(&run(&["train-verifier", "--config", c], dir.path()));
    ok(&run(&["train-explainers", "--config", c], dir.path()));
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"claim\": \"x\"}\n").unwrap();
    let (code, line) = failure(&run(&["explain", "--config", c, "--input", bad.to_str().unwrap()], dir.path()));
    assert_eq!(code, 3);
    assert!(line.contains("kind=schema"));
}
