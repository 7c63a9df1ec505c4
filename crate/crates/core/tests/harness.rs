//! Artifact layout, determinism and write-once behavior of the pipeline.

use std::fs;
use std::path::Path;

use sftlab::harness::io::RunManifest;
use sftlab::harness::{cmd_gen, cmd_probe, cmd_report, cmd_solve, cmd_train, config_hash, ExperimentConfig};
use sftlab::Error;

const CONFIG: &str = r#"
seed = 3
[mdp]
vocab_size = 2
horizon = 2
prompts = [[0], [1]]
[mdp.reward]
kind = "uniform"
seed = 2
low = -1.0
high = 1.0
[data]
n_demos = 40
n_pairs = 20
n_eval_pairs = 10
[train]
steps = 12
beta = 0.5
learning_rate = 0.5
checkpoint_every = 4
[probe]
n_states = 3
"#;

fn config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(CONFIG, Path::new(".")).unwrap();
    cfg.output.dir = out.to_path_buf();
    cfg
}

#[test]
fn gen_is_reproducible_and_hashed() {
    let tmp = tempfile::tempdir().unwrap();
    let a = cmd_gen(&config(&tmp.path().join("a"))).unwrap();
    let b = cmd_gen(&config(&tmp.path().join("b"))).unwrap();
    for f in ["demos.jsonl", "pairs.jsonl", "eval_pairs.jsonl", "reference.json", "expert.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let m: RunManifest = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.config_hash, config_hash(&config(&tmp.path().join("a"))));
    assert!(m.artifacts.iter().any(|p| p == "demos.jsonl"));
}

#[test]
fn seed_changes_the_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let a = config(tmp.path());
    let mut b = a.clone();
    b.set_seed(4);
    assert_ne!(config_hash(&a), config_hash(&b));
}

#[test]
fn artifacts_are_write_once() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    cmd_gen(&cfg).unwrap();
    match cmd_gen(&cfg) {
        Err(Error::ArtifactExists(_)) => {}
        other => panic!("expected ArtifactExists, got {other:?}"),
    }
}

#[test]
fn full_pipeline_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    cmd_gen(&cfg).unwrap();
    cmd_solve(&cfg).unwrap();
    cmd_train(&cfg).unwrap();
    let probe = cmd_probe(&cfg).unwrap();
    for f in ["report.json", "kendall.csv", "v0_trace.csv", "dpo_trace.csv", "c_spread_hist.csv"] {
        assert!(probe.join(f).exists(), "{f}");
    }
    let report = cmd_report(tmp.path()).unwrap();
    for key in ["c_spread", "kendall", "v0", "dpo", "dominance"] {
        assert!(report.to_lowercase().contains(key), "report lacks {key}:\n{report}");
    }
}
