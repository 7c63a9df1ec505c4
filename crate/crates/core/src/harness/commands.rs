use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::harness::acceptance::{run_acceptance, AcceptOptions, AcceptReport};
use crate::harness::config::ExperimentConfig;
use crate::harness::io::{
    fresh_dir, read_json, read_jsonl, read_metrics, sha256_hex, write_json, write_jsonl, write_metrics, write_new,
    RunManifest,
};
use crate::loss::resolve_pairs;
use crate::mdp::{build_preference_pairs, exhaustive_demonstrations, sample_demonstrations, Demonstration, PreferencePair, TokenMdp};
use crate::policy::PolicyTable;
use crate::probes::{
    all_pairs, dpo_eval_probe, logits_q_probe_model, select_probe_states, v0_trace_probe, value_dominance_probe,
    value_ranking_probe, ProbeReport,
};
use crate::soft_rl::{implicit_reward, solve_soft_with, verify_fixed_point, SoftSolution};
use crate::train::{train, Checkpoint, Objective, StageRecord, TrainContext};

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub objective: Option<Objective>,
    pub divergence: Option<String>,
    pub lr: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if let Some(o) = self.objective {
            cfg.train.objective = o;
        }
        if let Some(d) = &self.divergence {
            cfg.train.divergence = d.clone();
        }
        if let Some(lr) = self.lr {
            cfg.train.learning_rate = lr;
        }
        cfg.validate()
    }
}

/// The MDP, reference and expert solution implied by a config.
pub struct Setup {
    pub mdp: TokenMdp,
    pub reference: PolicyTable,
    pub expert: SoftSolution,
}

pub fn setup(cfg: &ExperimentConfig) -> Result<Setup> {
    let mdp = cfg.mdp.build()?;
    let reference = cfg.expert.reference.build(mdp.tree());
    let expert = solve_soft_with(&mdp, mdp.reward(), cfg.expert.beta, &reference, cfg.expert.form)?;
    Ok(Setup { mdp, reference, expert })
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    sha256_hex(cfg.canonical().as_bytes())
}

struct Phase<'a> {
    dir: PathBuf,
    manifest: RunManifest,
    clock: Instant,
    name: &'a str,
}

impl<'a> Phase<'a> {
    fn begin(cfg: &ExperimentConfig, name: &'a str) -> Result<Self> {
        let dir = fresh_dir(&cfg.output.dir, name)?;
        Ok(Phase {
            dir,
            manifest: RunManifest::new(config_hash(cfg)),
            clock: Instant::now(),
            name,
        })
    }

    fn path(&mut self, file: &str) -> PathBuf {
        let p = self.dir.join(file);
        self.manifest.artifact(&self.dir, &p);
        p
    }

    fn finish(mut self) -> Result<PathBuf> {
        self.manifest.phase(self.name, self.clock.elapsed().as_secs_f64());
        write_json(&self.dir.join("manifest.json"), &self.manifest)?;
        Ok(self.dir)
    }
}

/// Build the MDP, solve the expert and write datasets to `<out>/data`.
pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let mut phase = Phase::begin(cfg, "data")?;
    let s = setup(cfg)?;
    let expert = s.expert.policy();
    let demos = if cfg.data.exhaustive {
        exhaustive_demonstrations(&s.mdp, &expert)
    } else {
        sample_demonstrations(&s.mdp, &expert, cfg.data.n_demos, cfg.demo_seed())
    };
    let pairs = build_preference_pairs(&s.mdp, &s.reference, cfg.data.n_pairs, cfg.pair_seed())?;
    let eval = build_preference_pairs(&s.mdp, &s.reference, cfg.data.n_eval_pairs, cfg.eval_seed())?;
    write_json(&phase.path("config.json"), cfg)?;
    write_json(&phase.path("reference.json"), &s.reference)?;
    write_json(&phase.path("expert.json"), &s.expert.report(s.mdp.tree()))?;
    write_jsonl(&phase.path("demos.jsonl"), &demos)?;
    write_jsonl(&phase.path("pairs.jsonl"), &pairs)?;
    write_jsonl(&phase.path("eval_pairs.jsonl"), &eval)?;
    phase.finish()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveSummary {
    pub n_states: usize,
    pub j_star: Vec<f64>,
    pub residuals: crate::soft_rl::ResidualReport,
    /// Max gap between implicit sequence rewards and true returns.
    pub round_trip_error: f64,
}

/// Solve the expert and write the solution and its checks to `<out>/solve`.
pub fn cmd_solve(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let mut phase = Phase::begin(cfg, "solve")?;
    let s = setup(cfg)?;
    let residuals = verify_fixed_point(&s.expert, &s.mdp, s.mdp.reward());
    let implicit = implicit_reward(&s.mdp, &s.expert.policy(), &s.reference, s.expert.beta, &s.expert.v)?;
    let mut round_trip_error: f64 = 0.0;
    for seq in &implicit.sequences {
        let ret = s.mdp.sequence_return(seq.prompt_id, &seq.response)?;
        round_trip_error = round_trip_error.max((seq.reward - ret).abs());
    }
    let summary = SolveSummary {
        n_states: s.mdp.tree().len(),
        j_star: s.expert.j_star.clone(),
        residuals,
        round_trip_error,
    };
    write_json(&phase.path("solution.json"), &s.expert.report(s.mdp.tree()))?;
    write_json(&phase.path("implicit_reward.json"), &implicit.sequences)?;
    write_json(&phase.path("summary.json"), &summary)?;
    phase.finish()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub objective: Objective,
    pub steps: usize,
    pub stages: Vec<StageRecord>,
    pub lambda_trace: Vec<f64>,
    pub checkpoints: Vec<String>,
}

struct Datasets {
    reference: PolicyTable,
    demos: Vec<Demonstration>,
    pairs: Vec<PreferencePair>,
    eval: Vec<PreferencePair>,
}

fn load_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let dir = cfg.output.dir.join("data");
    if !dir.join("manifest.json").exists() {
        return Err(Error::config(
            "output.dir",
            format!("no datasets under {}; run `gen` first", dir.display()),
        ));
    }
    Ok(Datasets {
        reference: read_json(&dir.join("reference.json"))?,
        demos: read_jsonl(&dir.join("demos.jsonl"))?,
        pairs: read_jsonl(&dir.join("pairs.jsonl"))?,
        eval: read_jsonl(&dir.join("eval_pairs.jsonl"))?,
    })
}

/// Train on the datasets in `<out>/data`; writes `<out>/train`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let data = load_datasets(cfg)?;
    let mut phase = Phase::begin(cfg, "train")?;
    let s = setup(cfg)?;
    let ctx = TrainContext::new(&s.mdp, &data.reference, &cfg.train)?
        .with_expert(&s.expert.policy())?
        .with_eval_pairs(&data.eval)?;
    let init = cfg.initial_model(s.mdp.tree(), &data.reference);
    let run = train(&ctx, &init, &data.demos, &data.pairs, &cfg.train)?;
    write_metrics(&phase.path("metrics.jsonl"), &run.stream)?;
    let ckpt_dir = phase.dir.join("checkpoints");
    std::fs::create_dir(&ckpt_dir).map_err(|e| Error::io(format!("creating {}", ckpt_dir.display()), e))?;
    let mut names = Vec::new();
    for (i, c) in run.checkpoints.iter().enumerate() {
        let name = format!("ckpt_{i:05}_step_{:06}_{}.json", c.step, c.stage);
        write_json(&phase.path(&format!("checkpoints/{name}")), c)?;
        names.push(name);
    }
    write_json(&phase.path("final_model.json"), &run.final_model)?;
    let summary = RunSummary {
        objective: cfg.train.objective,
        steps: cfg.train.steps,
        stages: run.stages,
        lambda_trace: run.lambda_trace,
        checkpoints: names,
    };
    write_json(&phase.path("run.json"), &summary)?;
    phase.finish()
}

/// Checkpoints written by `train`, in training order.
pub fn load_checkpoints(out: &Path) -> Result<Vec<Checkpoint>> {
    let dir = out.join("train").join("checkpoints");
    let entries = std::fs::read_dir(&dir).map_err(|_| Error::MissingCheckpoint(dir.display().to_string()))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    if paths.is_empty() {
        return Err(Error::MissingCheckpoint(dir.display().to_string()));
    }
    paths.sort();
    paths.iter().map(|p| read_json(p)).collect()
}

fn every_kth(mut ckpts: Vec<Checkpoint>, k: usize) -> Vec<Checkpoint> {
    let last = ckpts.len() - 1;
    let mut i = 0;
    ckpts.retain(|_| {
        let keep = i % k == 0 || i == last;
        i += 1;
        keep
    });
    ckpts
}

/// Build the probe report for the checkpoints of this run.
pub fn probe_report(cfg: &ExperimentConfig, exec: Exec) -> Result<ProbeReport> {
    let data = load_datasets(cfg)?;
    let checkpoints = every_kth(load_checkpoints(&cfg.output.dir)?, cfg.probe.every);
    let s = setup(cfg)?;
    let tree = s.mdp.tree();
    let beta = cfg.probe_beta();
    let sol = solve_soft_with(&s.mdp, s.mdp.reward(), beta, &data.reference, cfg.probe.form)?;
    let last = checkpoints.last().expect("non-empty");
    let c = logits_q_probe_model(tree, &last.model, &sol, beta);
    let states = select_probe_states(tree, cfg.probe.n_states, cfg.state_seed());
    let ranking = value_ranking_probe(exec, tree, &checkpoints, &data.reference, &states, beta, cfg.probe.form)?;
    let v0 = v0_trace_probe(&s.mdp, &checkpoints, &data.reference, beta)?;
    let eval = resolve_pairs(&s.mdp, &data.eval)?;
    let dpo = (!eval.is_empty()).then(|| {
        dpo_eval_probe(exec, &s.mdp, &checkpoints, &data.reference, &eval, beta, Some(s.mdp.reward()))
    });
    let dominance = value_dominance_probe(
        tree,
        &last.model.logits_table(tree),
        &sol,
        &all_pairs(&states),
        last.model.temperature,
        beta,
    );
    Ok(ProbeReport {
        c_spread: c.c_spread,
        c_value: c.c_value,
        value_ranking: ranking,
        v0_trace: v0,
        dpo_eval_trace: dpo,
        value_dominance: dominance,
    })
}

/// Run every probe on `<out>/train/checkpoints`; writes `<out>/probe`.
pub fn cmd_probe(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let report = probe_report(cfg, Exec::default())?;
    let mut phase = Phase::begin(cfg, "probe")?;
    write_json(&phase.path("report.json"), &report)?;
    write_new(&phase.path("kendall.csv"), report.kendall_csv().as_bytes())?;
    write_new(&phase.path("v0_trace.csv"), report.v0_csv().as_bytes())?;
    write_new(&phase.path("dpo_trace.csv"), report.dpo_csv().as_bytes())?;
    write_new(&phase.path("c_spread_hist.csv"), report.c_spread_histogram_csv().as_bytes())?;
    phase.finish()
}

/// Run the acceptance suite; with `out`, also writes `<out>/accept/report.json`.
pub fn cmd_accept(opts: &AcceptOptions, out: Option<&Path>) -> Result<AcceptReport> {
    let report = run_acceptance(opts)?;
    if let Some(out) = out {
        let dir = fresh_dir(out, "accept")?;
        write_json(&dir.join("report.json"), &report)?;
        write_new(&dir.join("report.txt"), format!("{report}\n").as_bytes())?;
    }
    Ok(report)
}

/// `gen`, `train` and `probe` in one go.
pub fn cmd_pipeline(cfg: &ExperimentConfig) -> Result<()> {
    cmd_gen(cfg)?;
    cmd_train(cfg)?;
    cmd_probe(cfg)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run: String,
    pub seed: u64,
    pub objective: Objective,
    pub divergence: String,
    pub learning_rate: f64,
    pub final_loss: f64,
    pub final_kl: f64,
    pub final_d_f: Option<f64>,
    pub error: Option<String>,
}

/// Expand `[sweep]` into configs with disjoint output directories.
pub fn sweep_configs(cfg: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
    let sw = &cfg.sweep;
    let seeds = if sw.seeds.is_empty() { vec![cfg.seed] } else { sw.seeds.clone() };
    let lrs = if sw.learning_rates.is_empty() {
        vec![cfg.train.learning_rate]
    } else {
        sw.learning_rates.clone()
    };
    let objectives: Vec<Objective> = if sw.objectives.is_empty() {
        vec![cfg.train.objective]
    } else {
        sw.objectives.iter().map(|o| o.parse()).collect::<Result<_>>()?
    };
    let divergences = if sw.divergences.is_empty() {
        vec![cfg.train.divergence.clone()]
    } else {
        sw.divergences.clone()
    };
    let root = cfg.output.dir.join("sweep");
    let mut out = Vec::new();
    for &seed in &seeds {
        for &lr in &lrs {
            for &objective in &objectives {
                for div in &divergences {
                    let name = format!("run_{:03}", out.len());
                    let mut c = cfg.clone();
                    c.sweep = Default::default();
                    c.output.dir = root.join(&name);
                    Overrides {
                        seed: Some(seed),
                        lr: Some(lr),
                        objective: Some(objective),
                        divergence: Some(div.clone()),
                        out: None,
                    }
                    .apply(&mut c)?;
                    out.push((name, c));
                }
            }
        }
    }
    Ok(out)
}

/// Run the grid of `[sweep]` in parallel; writes `<out>/sweep/summary.csv`.
pub fn cmd_sweep(cfg: &ExperimentConfig, exec: Exec) -> Result<Vec<SweepRow>> {
    let configs = sweep_configs(cfg)?;
    let root = fresh_dir(&cfg.output.dir, "sweep")?;
    let rows = exec.map_slice(&configs, |(name, c)| {
        let outcome = cmd_pipeline(c).and_then(|_| read_metrics(&c.output.dir.join("train/metrics.jsonl")));
        let (last, error) = match outcome {
            Ok(stream) => (stream.last().cloned(), None),
            Err(e) => (None, Some(e.to_string())),
        };
        SweepRow {
            run: name.clone(),
            seed: c.seed,
            objective: c.train.objective,
            divergence: c.train.divergence.clone(),
            learning_rate: c.train.learning_rate,
            final_loss: last.as_ref().map_or(f64::NAN, |m| m.loss),
            final_kl: last.as_ref().map_or(f64::NAN, |m| m.kl),
            final_d_f: last.and_then(|m| m.d_f),
            error,
        }
    });
    let mut csv = String::from("run,seed,objective,divergence,learning_rate,final_loss,final_kl,final_d_f,error\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{:.17e},{:.17e},{:.17e},{},{}\n",
            r.run,
            r.seed,
            serde_json::to_string(&r.objective).unwrap().trim_matches('"'),
            r.divergence,
            r.learning_rate,
            r.final_loss,
            r.final_kl,
            r.final_d_f.map(|d| format!("{d:.17e}")).unwrap_or_default(),
            r.error.as_deref().unwrap_or("").replace(',', ";"),
        ));
    }
    write_new(&root.join("summary.csv"), csv.as_bytes())?;
    Ok(rows)
}

/// Human-readable summary of whatever artifacts exist under `out`.
pub fn cmd_report(out: &Path) -> Result<String> {
    let mut text = format!("run directory {}\n", out.display());
    let mut found = false;
    for phase in ["data", "solve", "train", "probe", "accept", "sweep"] {
        let m = out.join(phase).join("manifest.json");
        if m.exists() {
            found = true;
            let manifest: RunManifest = read_json(&m)?;
            let secs: f64 = manifest.phases.iter().map(|p| p.seconds).sum();
            text.push_str(&format!(
                "{phase}: {} artifacts, {:.2}s, config {}\n",
                manifest.artifacts.len(),
                secs,
                &manifest.config_hash[..12]
            ));
        }
    }
    let solve = out.join("solve/summary.json");
    if solve.exists() {
        let s: SolveSummary = read_json(&solve)?;
        text.push_str(&format!(
            "solve: {} states, J* = {:?}, max residual {:.3e}, round trip {:.3e}\n",
            s.n_states,
            s.j_star,
            s.residuals.max(),
            s.round_trip_error
        ));
    }
    let metrics = out.join("train/metrics.jsonl");
    if metrics.exists() {
        let stream = read_metrics(&metrics)?;
        if let (Some(first), Some(last)) = (stream.first(), stream.last()) {
            text.push_str(&format!(
                "train: {} records, loss {:.6} -> {:.6}, kl {:.6} -> {:.6}",
                stream.len(),
                first.loss,
                last.loss,
                first.kl,
                last.kl
            ));
            if let Some(d) = last.d_f {
                text.push_str(&format!(", d_f {d:.6}"));
            }
            text.push('\n');
        }
        let run: RunSummary = read_json(&out.join("train/run.json"))?;
        let names: Vec<&str> = run.stages.iter().map(|s| s.name.as_str()).collect();
        text.push_str(&format!("stages: {}\n", names.join(", ")));
        if run.lambda_trace.len() > 1 {
            text.push_str(&format!("lambda: {:?}\n", run.lambda_trace));
        }
    }
    let probe = out.join("probe/report.json");
    if probe.exists() {
        let p: ProbeReport = read_json(&probe)?;
        let k = &p.value_ranking.kendall;
        let min_tau = k.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        text.push_str(&format!(
            "probe: {} checkpoints, min kendall tau {:.4}, max c_spread {:.3e}, dominance fraction {:.3}\n",
            k.len(),
            min_tau,
            p.c_spread.iter().copied().fold(0.0, f64::max),
            p.value_dominance.fraction
        ));
        let finals: Vec<f64> = p.v0_trace.values.iter().filter_map(|v| v.last().copied()).collect();
        text.push_str(&format!(
            "v0: final {:?}, entry steps {:?}, settle steps {:?}\n",
            finals, p.v0_trace.entry_step, p.v0_trace.settle_step
        ));
        let trace = p.dpo_eval_trace.as_ref();
        let pts = trace.map(|t| t.points.as_slice()).unwrap_or_default();
        if let (Some(first), Some(last)) = (pts.first(), pts.last()) {
            text.push_str(&format!(
                "dpo eval: loss {:.6} -> {:.6}, accuracy {:.3} -> {:.3}",
                first.loss, last.loss, first.accuracy, last.accuracy
            ));
            if let Some(r) = trace.and_then(|t| t.correlation) {
                text.push_str(&format!(", loss/return correlation {r:.3}"));
            }
            text.push('\n');
        }
    }
    let accept = out.join("accept/report.txt");
    if accept.exists() {
        found = true;
        text.push_str(&crate::harness::io::read_text(&accept)?);
    }
    if !found {
        return Err(Error::MissingCheckpoint(format!("no artifacts under {}", out.display())));
    }
    Ok(text)
}
