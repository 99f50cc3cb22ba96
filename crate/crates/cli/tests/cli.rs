use std::path::Path;
use std::process::{Command, Output};

use gebd_core::datamodel::{load_annotations, load_report, write_predictions, BoundaryPrediction, PredictionMap};

fn gebd(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gebd"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Writes the annotations of `split` back out as predictions.
fn oracle_predictions(work: &Path, split: &str) -> std::path::PathBuf {
    let ann = load_annotations(&work.join("data").join(split).join("annotations.json")).unwrap();
    let preds: PredictionMap = ann
        .iter()
        .map(|a| {
            let list = a
                .boundaries
                .iter()
                .map(|&time| BoundaryPrediction { time, confidence: 1.0 })
                .collect();
            (a.id.clone(), list)
        })
        .collect();
    let path = work.join("oracle.json");
    write_predictions(&preds, &path).unwrap();
    path
}

#[test]
fn predictions_equal_to_annotations_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path();
    let o = gebd(work, &["gen", "--count", "200", "--test-count", "5", "--seed", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pred = oracle_predictions(work, "train");
    let ann = work.join("data/train/annotations.json");
    let out = work.join("oracle_report.json");
    let o = gebd(
        work,
        &[
            "eval",
            "--pred",
            pred.to_str().unwrap(),
            "--ann",
            ann.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
    );
    assert!(o.status.success());
    let report = load_report(&out).unwrap();
    assert_eq!(report.rows.len(), 10);
    assert!(report.rows.iter().all(|r| r.f1 == 1.0 && r.fp == 0 && r.fn_ == 0));
}

#[test]
fn eval_with_one_threshold_prints_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path();
    assert!(gebd(work, &["gen", "--count", "3", "--test-count", "2"]).status.success());
    let pred = oracle_predictions(work, "test");
    let ann = work.join("data/test/annotations.json");
    let o = gebd(
        work,
        &["eval", "--pred", pred.to_str().unwrap(), "--ann", ann.to_str().unwrap(), "--thresholds", "0.05"],
    );
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2, "{text}");
    assert!(lines[0].contains("threshold") && lines[0].contains("f1"));
    assert!(lines[1].trim_start().starts_with("0.050"));
    assert!(work.join("report.json").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path();

    let o = gebd(work, &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(gebd(work, &[]).status.code(), Some(1));
    assert_eq!(gebd(work, &["--help"]).status.code(), Some(0));

    // Invalid configuration.
    assert_eq!(gebd(work, &["--set", "theta=1.5", "gen"]).status.code(), Some(1));
    assert_eq!(gebd(work, &["--set", "levels=4", "gen"]).status.code(), Some(1));
    assert_eq!(gebd(work, &["--set", "no_such_key=1", "gen"]).status.code(), Some(1));
    let bad = work.join("bad.toml");
    std::fs::write(&bad, "theta = [").unwrap();
    assert_eq!(gebd(work, &["--config", bad.to_str().unwrap(), "gen"]).status.code(), Some(1));
    assert_eq!(
        gebd(work, &["eval", "--pred", "p", "--ann", "a", "--thresholds", "1.5"]).status.code(),
        Some(1)
    );

    // Stages out of order.
    assert_eq!(gebd(work, &["featurize"]).status.code(), Some(1));

    // Runtime failure: unreadable inputs.
    let o = gebd(work, &["eval", "--pred", "missing.json", "--ann", "missing.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn manifest_paths_are_relative_to_the_workdir() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path();
    let fast = ["--preset", "desk", "--set", "epochs_local=1", "--set", "epochs_decoder=1"];
    assert!(gebd(work, &["gen", "--count", "4", "--test-count", "2"]).status.success());
    let o = gebd(work, &[&fast[..], &["train-local"]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = std::fs::read_to_string(work.join("manifest.json")).unwrap();
    assert!(!manifest.contains(work.to_str().unwrap()), "{manifest}");
}
