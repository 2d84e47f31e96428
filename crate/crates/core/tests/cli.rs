use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sac_core::datagen::{generate, load_dataset, SynthConfig};
use sac_core::localizer::{train, AttentionMode, LocalizerConfig};
use sac_core::params::ParamSet;
use serde_json::Value;

fn sac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sac")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = sac(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path and contents of every file under `root`, sorted.
fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const SMALL: &[&str] = &["--synth.train_videos", "12", "--synth.test_videos", "6"];

#[test]
fn constant_cost_instance() {
    let dir = tempfile::tempdir().unwrap();
    let inst = dir.path().join("inst.json");
    fs::write(&inst, r#"{"S": [[0.5, 0.5], [0.5, 0.5]], "a_m": [1, 1], "a_f": [1, 1]}"#).unwrap();
    let report: Value = serde_json::from_str(&ok(&["sinkhorn", "--instance", path(&inst)])).unwrap();
    assert!((report["loss"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    for row in report["plan"].as_array().unwrap() {
        for x in row.as_array().unwrap() {
            assert!((x.as_f64().unwrap() - 0.5).abs() < 1e-6);
        }
    }
}

#[test]
fn ttest_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    fs::write(&a, "1\n2\n3\n").unwrap();
    fs::write(&b, "map\n2\n3\n4\n").unwrap();
    let r: Value = serde_json::from_str(&ok(&["ttest", "--a", path(&a), "--b", path(&b)])).unwrap();
    assert!((r["t"].as_f64().unwrap() + 1.224744871).abs() < 1e-6);
    assert!((r["pooled_sd"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    let out = dir.path().join("t.json");
    assert!(ok(&["ttest", "--a", path(&a), "--b", path(&a), "--out", path(&out)]).is_empty());
    let same: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(same["t"].as_f64(), Some(0.0));
    assert_eq!(same["p"].as_f64(), Some(1.0));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sac(&[]).status.code(), Some(1));
    assert_eq!(sac(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(sac(&["synth", "--no.such.key", "1"]).status.code(), Some(1));
    assert_eq!(sac(&["train", "--mode", "sideways"]).status.code(), Some(1));
    let usage = String::from_utf8(sac(&["synth", "--bogus", "1"]).stderr).unwrap();
    assert!(usage.contains("usage: sac"));
    // missing input file
    let missing = dir.path().join("absent.json");
    assert_eq!(sac(&["sinkhorn", "--instance", path(&missing)]).status.code(), Some(2));
    // infeasible synthetic layout is a contract violation
    assert_eq!(sac(&["synth", "--out", path(dir.path()), "--synth.frames", "8"]).status.code(), Some(1));
}

#[test]
fn synth_is_byte_identical_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (one, two) = (dir.path().join("one"), dir.path().join("two"));
    for d in [&one, &two] {
        let mut args = vec!["synth", "--out", path(d), "--seed", "5"];
        args.extend_from_slice(SMALL);
        ok(&args);
    }
    let files = tree(&one);
    assert_eq!(files.len(), 19);
    assert_eq!(files, tree(&two));

    let manifest: Value = serde_json::from_str(&fs::read_to_string(one.join("manifest.json")).unwrap()).unwrap();
    let entries = manifest.as_array().unwrap();
    assert_eq!(entries.len(), 18);
    assert_eq!(entries.iter().filter(|e| e["split"] == "train").count(), 12);

    let cfg = SynthConfig { train_videos: 12, test_videos: 6, seed: 5, ..Default::default() };
    assert_eq!(load_dataset(&one.join("manifest.json"), Some(cfg.classes)).unwrap(), generate(&cfg).unwrap());
}

#[test]
fn train_matches_the_library_and_lowers_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = (dir.path().join("data"), dir.path().join("run"));
    let mut args = vec!["synth", "--out", path(&data)];
    args.extend_from_slice(SMALL);
    ok(&args);
    ok(&[
        "train",
        "--data",
        path(&data),
        "--out",
        path(&run),
        "--mode",
        "none",
        "--localizer.hidden",
        "8",
        "--seed",
        "2",
    ]);

    let cfg = SynthConfig { train_videos: 12, test_videos: 6, ..Default::default() };
    let lc = LocalizerConfig { mode: AttentionMode::None, hidden: 8, seed: 2, ..Default::default() };
    let outcome = train(&generate(&cfg).unwrap(), &lc).unwrap();
    assert_eq!(ParamSet::read_checkpoint(&run.join("checkpoint.bin")).unwrap(), outcome.params);

    let mut reader = csv::Reader::from_path(run.join("loss_log.csv")).unwrap();
    let losses: Vec<f64> = reader.records().map(|r| r.unwrap()[1].parse().unwrap()).collect();
    assert_eq!(losses.len(), 30);
    assert!(losses[29] < losses[0], "{losses:?}");
    assert_eq!(losses, outcome.log.iter().map(|l| l.loss).collect::<Vec<_>>());

    let eval = dir.path().join("eval");
    ok(&[
        "eval",
        "--data",
        path(&data),
        "--checkpoint",
        path(&run.join("checkpoint.bin")),
        "--out",
        path(&eval),
        "--mode",
        "none",
        "--localizer.hidden",
        "8",
    ]);
    let results = fs::read_to_string(eval.join("results.csv")).unwrap();
    assert!(results.starts_with("method,seed,iou,map\n"), "{results}");
}
