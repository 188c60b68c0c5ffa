use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use twinbranch::harness::bench::BenchReport;
use twinbranch::harness::verify::VerifyReport;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twinbranch")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn verify_reports_and_exits_by_outcome() {
    let dir = tempfile::tempdir().unwrap();
    let ok = run(&["verify", "--criteria", "1,8", "--out", s(dir.path())]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stdout));
    let report: VerifyReport = serde_json::from_slice(&fs::read(dir.path().join("verify_report.json")).unwrap()).unwrap();
    assert!(report.passed && report.criterion_passed(1) && report.criterion_passed(8));

    let bad = run(&["verify", "--criteria", "1", "--flip-dr1conv-sign", "--out", s(dir.path())]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL [1] dr1conv_3x3_vs_per_position"));
}

#[test]
fn train_then_eval_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(&config, r#"{"scenes": 1, "log_every": 2, "scene": {"height": 64, "width": 128}}"#).unwrap();
    let train = dir.path().join("train");
    let out = run(&[
        "train-toy", "--tasks", "seg,depth,det3d", "--steps", "3", "--seed", "5",
        "--config", s(&config), "--out", s(&train),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = fs::read_to_string(train.join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,total,fcos,ctr,dim,ori,loc,attr,mask,pano,depth\n"));
    assert_eq!(trace.lines().count(), 4);
    assert!(train.join("train_report.json").exists() && train.join("routing_scores.json").exists());

    let eval = dir.path().join("eval");
    let out = run(&["eval", "--checkpoint", s(&train.join("checkpoint")), "--scenes", "2", "--out", s(&eval)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(eval.join("eval_report.json").exists());
    assert!(eval.join("scene000_image.ppm").exists() && eval.join("scene000_depth_pred.pgm").exists());
}

#[test]
fn bench_accepts_size_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["bench", "--c", "4", "--hw", "8x6", "--kernel", "3", "--repeats", "1", "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: BenchReport = serde_json::from_slice(&fs::read(dir.path().join("bench.json")).unwrap()).unwrap();
    assert_eq!((r.config.channels, r.config.height, r.config.width), (4, 8, 6));
    assert!(run(&["bench", "--hw", "8by6"]).status.code() == Some(2));
}

#[test]
fn rejects_unknown_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train-toy", "--tasks", "seg,flow", "--steps", "1", "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("flow"));
}
