use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::config::parse_error;
use crate::train::Metrics;

/// Create `root/name` for writing; fails if it already exists.
pub fn fresh_dir(root: &Path, name: &str) -> Result<PathBuf> {
    let dir = root.join(name);
    if dir.exists() {
        return Err(Error::ArtifactExists(dir));
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    Ok(dir)
}

/// Write a new file; never overwrites.
pub fn write_new(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::AlreadyExists => Error::ArtifactExists(path.to_path_buf()),
            _ => Error::io(format!("creating {}", path.display()), e),
        })?;
    f.write_all(bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| parse_error("json", e))?;
    text.push('\n');
    write_new(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| parse_error(&path.display().to_string(), e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// One JSON value per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).map_err(|e| parse_error("json", e))?);
        out.push('\n');
    }
    write_new(path, out.as_bytes())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| parse_error(&format!("{}:{}", path.display(), i + 1), e))
        })
        .collect()
}

/// 17 significant digits; JSON has no non-finite numbers, so those become
/// strings.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("\"{x}\"")
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "null".to_string(), fmt_f64)
}

/// A metrics record with a fixed field order.
pub fn metrics_line(m: &Metrics) -> String {
    let mut s = String::new();
    write!(
        s,
        "{{\"step\":{},\"stage\":{},\"loss\":{},\"kl\":{},\"d_f\":{},\"v0\":[",
        m.step,
        serde_json::to_string(&m.stage).unwrap(),
        fmt_f64(m.loss),
        fmt_f64(m.kl),
        fmt_opt(m.d_f)
    )
    .unwrap();
    for (i, v) in m.v0.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&fmt_f64(*v));
    }
    write!(
        s,
        "],\"lambda\":{},\"dpo_eval_loss\":{},\"pair_accuracy\":{}}}",
        fmt_opt(m.lambda),
        fmt_opt(m.dpo_eval_loss),
        fmt_opt(m.pair_accuracy)
    )
    .unwrap();
    s
}

pub fn write_metrics(path: &Path, stream: &[Metrics]) -> Result<()> {
    let mut out = String::new();
    for m in stream {
        out.push_str(&metrics_line(m));
        out.push('\n');
    }
    write_new(path, out.as_bytes())
}

pub fn read_metrics(path: &Path) -> Result<Vec<Metrics>> {
    read_jsonl(path)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTime {
    pub phase: String,
    pub seconds: f64,
}

/// Written next to the artifacts of each command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub artifacts: Vec<String>,
    pub phases: Vec<PhaseTime>,
}

impl RunManifest {
    pub fn new(config_hash: String) -> Self {
        RunManifest {
            config_hash,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            artifacts: Vec::new(),
            phases: Vec::new(),
        }
    }

    pub fn artifact(&mut self, dir: &Path, path: &Path) {
        let rel = path.strip_prefix(dir).unwrap_or(path);
        self.artifacts.push(rel.display().to_string());
    }

    pub fn phase(&mut self, phase: &str, seconds: f64) {
        self.phases.push(PhaseTime {
            phase: phase.to_string(),
            seconds,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_round_trip_exactly() {
        let m = Metrics {
            step: 7,
            stage: "sft1".into(),
            loss: 0.1 + 0.2,
            kl: 1.0 / 3.0,
            d_f: Some(std::f64::consts::PI * 1e-9),
            v0: vec![-0.0, 2.5e-300],
            lambda: None,
            dpo_eval_loss: Some(std::f64::consts::LN_2),
            pair_accuracy: None,
        };
        let back: Metrics = serde_json::from_str(&metrics_line(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn write_once() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_new(&p, b"x").unwrap();
        assert!(matches!(write_new(&p, b"y"), Err(Error::ArtifactExists(_))));
        fresh_dir(dir.path(), "sub").unwrap();
        assert!(fresh_dir(dir.path(), "sub").is_err());
    }

    #[test]
    fn sha_of_empty() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
