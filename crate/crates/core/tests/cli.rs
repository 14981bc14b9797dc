//! End-to-end checks of the command-line binary: exit codes, file outputs
//! and the grammar listing.

use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gridqa"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("gridqa-cli-tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn enumerate_grammar_prints_108_lines() {
    let out = run(&["enumerate-grammar"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 108);
    assert!(lines.contains(&"red door is closed"));
    assert!(lines.contains(&"green goal is north"));
}

#[test]
fn unknown_subcommand_and_flag_exit_1() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    let out = run(&["train", "--warp-speed=9"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_checkpoint_is_usage_error() {
    let out = run(&["transfer"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));
}

#[test]
fn runtime_failure_exits_2() {
    let out = run(&["transfer", "--checkpoint", "/nonexistent/nope.ckpt", "--episodes=1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_key_exits_2_and_names_it() {
    let dir = tmp_dir("badcfg");
    let cfg = dir.join("bad.cfg");
    std::fs::write(&cfg, "alpha = 0.001\nwarpdrive = on\n").unwrap();
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("warpdrive") && err.contains("2"), "stderr: {err}");
}

#[test]
fn tiny_train_run_writes_outputs() {
    let dir = tmp_dir("tinytrain");
    let out = run(&[
        "train",
        "--model=baseline",
        "--episodes=3",
        "--seed=7",
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    for file in ["metrics.csv", "transcripts.jsonl", "final.ckpt"] {
        assert!(dir.join(file).exists(), "{file} missing");
    }
    let metrics = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "episode,return,length,ma100,loss_a,loss_q,syntax_err_rate");
    assert_eq!(lines.len(), 4, "header plus one row per episode");
    // baseline rows leave loss_q (and the syntax rate) empty
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(fields.len(), 7);
    assert!(fields[5].is_empty(), "loss_q must be empty for the baseline");

    let transcripts = std::fs::read_to_string(dir.join("transcripts.jsonl")).unwrap();
    for line in transcripts.lines() {
        let v: serde_json::Value = serde_json::from_str(line).expect("valid json per line");
        assert!(v["question"].is_null(), "baseline transcripts have no questions");
    }
}

#[test]
fn eval_runs_from_checkpoint() {
    let dir = tmp_dir("evalrun");
    let out = run(&[
        "train",
        "--model=baseline",
        "--episodes=2",
        "--seed=3",
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let ckpt = dir.join("final.ckpt");
    let out = run(&[
        "eval",
        "--model=baseline",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--episodes=2",
        "--seed=5",
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean return"));
}

#[test]
fn checkpoint_kind_mismatch_rejected_via_cli() {
    let dir = tmp_dir("mismatch");
    let out = run(&[
        "train",
        "--model=baseline",
        "--episodes=2",
        "--seed=3",
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    // loading a baseline checkpoint as the main model must fail
    let out = run(&[
        "transfer",
        "--model=main",
        "--episodes=1",
        "--checkpoint",
        dir.join("final.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match"));
}
