//! End-to-end runs of the `sftlab` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sftlab"))
}

fn minimal() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/minimal.toml")
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "sftlab {args:?} failed");
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_minimal_has_seven_states() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = minimal();
    ok(&["gen", "--config", path(&cfg), "--out", path(tmp.path())]);
    ok(&["solve", "--config", path(&cfg), "--out", path(tmp.path())]);
    let summary: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("solve/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["n_states"], 7);
}

#[test]
fn missing_reward_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[mdp]\nvocab_size = 2\nhorizon = 2\nprompts = [[0]]\n").unwrap();
    let out = run(&["gen", "--config", path(&cfg), "--out", path(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("reward"));
}

#[test]
fn gen_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = minimal();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen", "--config", path(&cfg), "--out", path(&a), "--seed", "7"]);
    ok(&["gen", "--config", path(&cfg), "--out", path(&b), "--seed", "7"]);
    for f in ["demos.jsonl", "pairs.jsonl", "eval_pairs.jsonl"] {
        assert_eq!(fs::read(a.join("data").join(f)).unwrap(), fs::read(b.join("data").join(f)).unwrap());
    }
}

/// `kl`, `d_f` and `v0` of every metrics record, flattened.
fn metrics(dir: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(dir.join("train/metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            let mut row = vec![v["kl"].as_f64().unwrap(), v["d_f"].as_f64().unwrap()];
            row.extend(v["v0"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()));
            row
        })
        .collect()
}

#[test]
fn tv_loss_tracks_mle_with_rescaled_rate() {
    // minimal.toml has β = 1, so rescale through a config copy with β = 0.5
    let tmp = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(minimal()).unwrap().replace("beta = 1.0", "beta = 0.5");
    let cfg = tmp.path().join("half.toml");
    fs::write(&cfg, text).unwrap();
    let (a, b) = (tmp.path().join("mle"), tmp.path().join("tv"));
    for (dir, obj, lr) in [(&a, "mle", "0.25"), (&b, "f_sft", "0.5")] {
        ok(&["gen", "--config", path(&cfg), "--out", path(dir)]);
        ok(&["train", "--config", path(&cfg), "--out", path(dir), "--objective", obj, "--divergence", "total_variation", "--lr", lr]);
    }
    let (ma, mb) = (metrics(&a), metrics(&b));
    assert_eq!(ma.len(), mb.len());
    for (ra, rb) in ma.iter().zip(&mb) {
        assert_eq!(ra.len(), rb.len());
        for (x, y) in ra.iter().zip(rb) {
            assert!((x - y).abs() <= 1e-8, "{x} vs {y}");
        }
    }
}

#[test]
fn interleaved_run_has_eight_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = minimal();
    ok(&["gen", "--config", path(&cfg), "--out", path(tmp.path())]);
    ok(&["train", "--config", path(&cfg), "--out", path(tmp.path()), "--objective", "interleaved"]);
    let report = ok(&["report", "--out", path(tmp.path())]);
    assert!(report.contains("stages: sft1, dpo1, sft2, dpo2, sft3, dpo3, sft4, dpo4"), "{report}");
}

#[test]
fn zero_steps_gives_one_checkpoint_and_unit_kendall() {
    let tmp = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(minimal()).unwrap().replace("steps = 50", "steps = 0");
    let cfg = tmp.path().join("zero.toml");
    fs::write(&cfg, text).unwrap();
    let out = tmp.path().join("o");
    ok(&["gen", "--config", path(&cfg), "--out", path(&out)]);
    ok(&["train", "--config", path(&cfg), "--out", path(&out)]);
    let ckpts: Vec<_> = fs::read_dir(out.join("train/checkpoints")).unwrap().collect();
    assert_eq!(ckpts.len(), 1);
    ok(&["probe", "--config", path(&cfg), "--out", path(&out)]);
    let kendall = fs::read_to_string(out.join("probe/kendall.csv")).unwrap();
    let rows: Vec<&str> = kendall.lines().filter(|l| !l.is_empty()).collect();
    let last = rows.last().unwrap();
    let tau: f64 = last.rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(tau, 1.0, "{kendall}");
}

#[test]
fn full_report_names_every_section() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = minimal();
    for cmd in ["gen", "solve", "train", "probe"] {
        ok(&[cmd, "--config", path(&cfg), "--out", path(tmp.path())]);
    }
    let report = ok(&["report", "--out", path(tmp.path())]);
    for key in ["solve:", "train:", "stages:", "probe:", "kendall", "c_spread", "dominance", "v0:", "dpo eval:"] {
        assert!(report.contains(key), "missing {key}:\n{report}");
    }
}

#[test]
fn injected_fault_fails_acceptance() {
    let out = run(&["accept", "--only", "1", "--inject-fault"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("[FAIL] 01"));
    let out = run(&["accept", "--only", "1"]);
    assert!(out.status.success());
}

#[test]
fn rerun_into_existing_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = minimal();
    ok(&["gen", "--config", path(&cfg), "--out", path(tmp.path())]);
    let out = run(&["gen", "--config", path(&cfg), "--out", path(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("exists"));
}
