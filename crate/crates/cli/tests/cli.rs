//! Black-box tests of the `connect` binary: exit codes, file outputs, and
//! report determinism for a miniature plan.

use std::path::Path;
use std::process::{Command, Output};

fn connect(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_connect"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = connect(&["train", "--definitely-not-a-flag"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_verify_suite_is_a_usage_error() {
    let out = connect(&["verify", "nonsense"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn verify_oracle_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let out = connect(&["verify", "oracle", "--out", report.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).contains("PASS"));
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("\"suite\": \"oracle\""));
}

#[test]
fn train_prune_finetune_analyze_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.bin");
    let pruned = dir.path().join("pruned.bin");
    let tuned = dir.path().join("tuned.bin");
    let scores = dir.path().join("scores.txt");

    let out = connect(&[
        "train",
        "--sizes",
        "6,4,1",
        "--epochs",
        "4",
        "--n-train",
        "512",
        "--n-test",
        "128",
        "--lambda2",
        "0.1",
        "--out",
        model.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));

    let out = connect(&[
        "prune",
        model.to_str().unwrap(),
        "--prune-fraction",
        "0.5",
        "--emit-scores",
        scores.to_str().unwrap(),
        "--out",
        pruned.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let score_text = std::fs::read_to_string(&scores).unwrap();
    assert!(score_text.starts_with("# importance v1"));

    let out = connect(&[
        "finetune",
        pruned.to_str().unwrap(),
        "--epochs",
        "2",
        "--n-train",
        "512",
        "--n-test",
        "128",
        "--out",
        tuned.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));

    let out = connect(&["analyze", tuned.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("phi_total"));
    assert!(text.contains("collapsed"));
    assert!(text.contains("a_in="));
}

#[test]
fn finetune_without_mask_is_a_run_failure() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.bin");
    let out = connect(&[
        "train",
        "--sizes",
        "6,3,1",
        "--epochs",
        "1",
        "--n-train",
        "128",
        "--n-test",
        "64",
        "--out",
        model.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let out = connect(&[
        "finetune",
        model.to_str().unwrap(),
        "--epochs",
        "1",
        "--out",
        dir.path().join("x.bin").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

fn mini_plan(dir: &Path) -> std::path::PathBuf {
    // shrink the default plan so the test stays fast
    let plan_path = dir.join("plan.json");
    let out = connect(&[
        "experiment",
        "--seeds",
        "2",
        "--write-plan",
        plan_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(&plan_path).unwrap();
    let mut plan: serde_json::Value = serde_json::from_str(&text).unwrap();
    plan["epochs"] = 3.into();
    plan["finetune_epochs"] = 2.into();
    plan["connect_warmup_epochs"] = 2.into();
    plan["n_train"] = 512.into();
    plan["n_test"] = 128.into();
    plan["runs"] = serde_json::json!([
        {"preset": "none", "method": "magnitude", "fraction": 0.5},
        {"preset": "connect", "method": "synflow", "fraction": 0.5},
    ]);
    std::fs::write(&plan_path, serde_json::to_string_pretty(&plan).unwrap()).unwrap();
    plan_path
}

#[test]
fn experiment_emits_deterministic_reports_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let plan = mini_plan(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out_dir in [&out_a, &out_b] {
        let out = connect(&[
            "experiment",
            "--plan",
            plan.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    }
    let report_a = std::fs::read(out_a.join("cluster_report.json")).unwrap();
    let report_b = std::fs::read(out_b.join("cluster_report.json")).unwrap();
    assert_eq!(
        report_a, report_b,
        "identical plans must give identical bytes"
    );

    // per-run artifact layout: <out>/<preset>/<method>/<seed>/
    let run_dir = out_a.join("connect").join("synflow").join("0");
    for file in [
        "model_trained.bin",
        "model_pruned.bin",
        "model_finetuned.bin",
        "metrics_train.jsonl",
        "metrics_finetune.jsonl",
        "scores.txt",
        "mask.json",
    ] {
        assert!(run_dir.join(file).exists(), "missing {file}");
    }
    let metrics = std::fs::read_to_string(run_dir.join("metrics_train.jsonl")).unwrap();
    let first_line = metrics.lines().next().unwrap();
    assert!(first_line.contains("\"schema\":\"metrics/v1\""));
    assert!(first_line.contains("chacha8"));
}
