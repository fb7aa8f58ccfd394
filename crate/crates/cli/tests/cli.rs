//! End-to-end checks of the `cralloc` binary: the full pipeline on a small
//! environment, error paths, determinism, and the worker-pool invariant.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cralloc::io::{load_checkpoint, read_lambda_table, read_results, read_sweep};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cralloc"));
    cmd.env_remove("CRALLOC_WORKERS");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawning the binary")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "`cralloc {}` failed:\nstdout: {}\nstderr: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn run_fail(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        !out.status.success(),
        "`cralloc {}` unexpectedly succeeded:\nstdout: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stdout)
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small but non-degenerate setup: three slices, full pipeline in seconds.
/// The wide correction band absorbs the coarse per-slice cost resolution.
const TINY_CONFIG: &str = r#"
[env]
requests = 240
slices = 3
seed = 11

[env.action_space]
channel_count = 2
queue_buckets = 8
model_count = 3

[train]
iterations = 60
batch_size = 64
hidden = [16, 12]
heads = 3
eval_every = 30
lambda_updates = 4
target_sync = 20

[correction]
band = 0.2

[cem]
iterations = 6
n_sample = 20
n_retain = 4

[serving]
ticks_per_slice = 5
"#;

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, format!("{TINY_CONFIG}\n{extra}")).unwrap();
    path
}

fn cs(path: &Path) -> String {
    path.to_str().unwrap().to_string()
}

fn with<'a>(cmd: &[&'a str], base: &[&'a str]) -> Vec<&'a str> {
    [cmd, base].concat()
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cs(&write_config(dir.path(), ""));
    let out = cs(&dir.path().to_path_buf());
    let base = ["--config", cfg.as_str(), "--out-dir", out.as_str()];

    let stdout = run_ok(&with(&["gen-data"], &base));
    assert!(stdout.contains("240 requests"));
    run_ok(&with(&["collect"], &base));
    let stdout = run_ok(&with(&["train"], &base));
    assert!(stdout.contains("trained ddqn"));
    run_ok(&with(&["eval"], &base));
    run_ok(&with(&["correct"], &base));
    run_ok(&with(&["eval"], &base));
    run_ok(&with(&["baseline", "static"], &base));
    run_ok(&with(&["baseline", "dcaf"], &base));
    run_ok(&with(&["baseline", "cem"], &base));
    let stdout = run_ok(&with(&["serve"], &base));
    assert!(stdout.contains("served 240 requests"));

    let ckpt = load_checkpoint(&dir.path().join("checkpoint.json")).unwrap();
    assert_eq!(ckpt.encoding.slices, 3);

    let (table, rows, fp) = read_lambda_table(&dir.path().join("lambda_table.csv")).unwrap();
    assert_eq!(table.slices(), 3);
    assert_eq!(rows.len(), 9);
    assert!(fp.is_some());

    let (_, results) = read_results(&dir.path().join("results.csv")).unwrap();
    let labels: Vec<&str> = results.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["ddqn", "ddqn+corrected", "static", "dcaf", "cem"]);
    // The fixed rule anchors the normalized score and its own budget line.
    let fixed = results.iter().find(|r| r.label == "static").unwrap();
    assert_eq!(fixed.score, Some(0.0));
    assert!((fixed.util_channel - 1.0).abs() < 1e-9);
    assert!((fixed.util_queue - 1.0).abs() < 1e-9);
    assert!((fixed.util_model - 1.0).abs() < 1e-9);
    // Correction is one-sided: a policy may undershoot the budget (nothing
    // to clamp at zero multiplier) but must never exceed it past the band.
    let corrected = results.iter().find(|r| r.label == "ddqn+corrected").unwrap();
    assert!(corrected.util_channel < 1.2 + 1e-9);
    assert!(corrected.util_queue < 1.2 + 1e-9);
    assert!(corrected.util_model < 1.2 + 1e-9);

    let text = fs::read_to_string(dir.path().join("results.txt")).unwrap();
    assert!(text.lines().next().unwrap().contains("policy"));
    for file in ["telemetry.csv", "serving.csv", "control.csv", "cem_log.csv", "cem_policy.json"] {
        assert!(dir.path().join(file).exists(), "missing {file}");
    }
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[train]\ngamma = 2.0\n").unwrap();
    let out = cs(&dir.path().to_path_buf());
    let stderr = run_fail(&["gen-data", "--config", path.to_str().unwrap(), "--out-dir", &out]);
    assert!(stderr.contains("configuration"), "stderr: {stderr}");

    let unknown = dir.path().join("unknown.toml");
    fs::write(&unknown, "[train]\nlerning_rate = 0.1\n").unwrap();
    let stderr =
        run_fail(&["gen-data", "--config", unknown.to_str().unwrap(), "--out-dir", &out]);
    assert!(stderr.contains("lerning_rate"), "stderr: {stderr}");

    // Bad flag values are caught by the parser.
    let stderr = run_fail(&["train", "--algo", "sarsa", "--out-dir", &out]);
    assert!(stderr.contains("sarsa"), "stderr: {stderr}");
}

#[test]
fn missing_artifacts_give_actionable_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cs(&write_config(dir.path(), ""));
    let out = cs(&dir.path().to_path_buf());
    let stderr = run_fail(&["eval", "--config", &cfg, "--out-dir", &out]);
    assert!(stderr.contains("gen-data") || stderr.contains("train"), "stderr: {stderr}");
}

#[test]
fn impossible_budget_fails_correction() {
    let dir = tempfile::tempdir().unwrap();
    // The queue budget sits far below the cheapest truncation length.
    let cfg = cs(&write_config(dir.path(), "[budgets]\nper_request_rates = [1.0, 0.05, 1.0]\n"));
    let out = cs(&dir.path().to_path_buf());
    let base = ["--config", cfg.as_str(), "--out-dir", out.as_str()];

    run_ok(&with(&["gen-data"], &base));
    run_ok(&with(&["collect"], &base));
    run_ok(&with(&["train"], &base));
    let stderr = run_fail(&with(&["correct"], &base));
    assert!(stderr.contains("band"), "stderr: {stderr}");
    // The table is still written for inspection.
    assert!(dir.path().join("lambda_table.csv").exists());
}

#[test]
fn reruns_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cs(&write_config(dir.path(), ""));
    let mut bytes: Vec<Vec<Vec<u8>>> = Vec::new();
    for sub in ["a", "b"] {
        let out = cs(&dir.path().join(sub));
        let base = ["--config", cfg.as_str(), "--out-dir", out.as_str()];
        run_ok(&with(&["gen-data"], &base));
        run_ok(&with(&["collect"], &base));
        run_ok(&with(&["train"], &base));
        bytes.push(
            ["dataset.jsonl", "transitions.jsonl", "checkpoint.json", "telemetry.csv"]
                .iter()
                .map(|f| fs::read(dir.path().join(sub).join(f)).unwrap())
                .collect(),
        );
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn worker_count_does_not_change_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cs(&write_config(dir.path(), ""));
    let out = cs(&dir.path().to_path_buf());
    let base = ["--config", cfg.as_str(), "--out-dir", out.as_str()];
    run_ok(&[&["gen-data"][..], &base].concat());

    let collect = |workers: &str| {
        let args = [&["collect"][..], &base].concat();
        let output = bin().args(&args).env("CRALLOC_WORKERS", workers).output().unwrap();
        assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
        fs::read(dir.path().join("transitions.jsonl")).unwrap()
    };
    let serial = collect("1");
    let threaded = collect("3");
    assert_eq!(serial, threaded);

    let args = [&["collect"][..], &base].concat();
    let output = bin().args(&args).env("CRALLOC_WORKERS", "lots").output().unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("CRALLOC_WORKERS"), "stderr: {stderr}");
}

#[test]
fn sweep_covers_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cs(&write_config(dir.path(), ""));
    let out = cs(&dir.path().to_path_buf());
    let base = ["--config", cfg.as_str(), "--out-dir", out.as_str()];

    run_ok(&with(&["gen-data"], &base));
    run_ok(&with(&["collect"], &base));
    let stdout = run_ok(&with(&["sweep", "--alpha", "0.1", "--k", "1", "--k", "5"], &base));
    assert!(stdout.contains("alpha"));

    let (fp, rows) = read_sweep(&dir.path().join("sweep.csv")).unwrap();
    assert!(fp.is_some());
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0].alpha, rows[0].k), (0.1, 1));
    assert_eq!((rows[1].alpha, rows[1].k), (0.1, 5));
    assert_eq!(rows[0].relative_time, 1.0);
    assert!(rows[1].relative_time.is_finite() && rows[1].relative_time > 0.0);
    assert!(dir.path().join("sweep.txt").exists());
}
