//! Read-only measurements over trained checkpoints.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::loss::ResolvedPair;
use crate::math::logsumexp;
use crate::mdp::{RewardTable, StateTree, TokenMdp};
use crate::policy::{PolicyModel, PolicyTable};
use crate::soft_rl::{expected_return, logit_value, SoftSolution, ValueForm};
use crate::train::{dpo_eval, Checkpoint};

/// Per-state offsets `d_a = l_a − (τ/β) Q(s,a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitQProbe {
    /// `max_a d_a − min_a d_a` per non-terminal state.
    pub c_spread: Vec<f64>,
    /// `C(s) = mean_a d_a`.
    pub c_value: Vec<f64>,
}

impl LogitQProbe {
    pub fn max_spread(&self) -> f64 {
        self.c_spread.iter().copied().fold(0.0, f64::max)
    }
}

/// Logits-as-Q decomposition of a dense logit table against a solution.
pub fn logits_q_probe(tree: &StateTree, logits: &[f64], sol: &SoftSolution, tau: f64, beta: f64) -> LogitQProbe {
    let vocab = tree.vocab();
    let scale = tau / beta;
    let mut c_spread = Vec::with_capacity(tree.n_nonterminal());
    let mut c_value = Vec::with_capacity(tree.n_nonterminal());
    for nt in 0..tree.n_nonterminal() {
        let row = &logits[nt * vocab..(nt + 1) * vocab];
        let d: Vec<f64> = row.iter().zip(sol.q_row(nt)).map(|(l, q)| l - scale * q).collect();
        let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = d.iter().copied().fold(f64::INFINITY, f64::min);
        c_spread.push(max - min);
        c_value.push(d.iter().sum::<f64>() / vocab as f64);
    }
    LogitQProbe { c_spread, c_value }
}

pub fn logits_q_probe_model(tree: &StateTree, model: &PolicyModel, sol: &SoftSolution, beta: f64) -> LogitQProbe {
    logits_q_probe(tree, &model.logits_table(tree), sol, model.temperature, beta)
}

/// Kendall τ-a: `(concordant − discordant) / C(n,2)`, ties counting zero.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::TooFew { needed: 2, got: n });
    }
    let mut score = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let s = (a[i] - a[j]).signum() * (b[i] - b[j]).signum();
            if (a[i] - a[j]) != 0.0 && (b[i] - b[j]) != 0.0 {
                score += s as i64;
            }
        }
    }
    Ok(score as f64 / (n * (n - 1) / 2) as f64)
}

/// `n` non-terminal states spread round-robin over depths, chosen by `seed`.
pub fn select_probe_states(tree: &StateTree, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_depth: Vec<Vec<usize>> = vec![Vec::new(); tree.horizon()];
    for nt in 0..tree.n_nonterminal() {
        let s = tree.nt_state(nt);
        by_depth[tree.depth(s)].push(s);
    }
    for bucket in by_depth.iter_mut() {
        bucket.shuffle(&mut rng);
    }
    let mut out = Vec::with_capacity(n);
    let mut cursor = vec![0; by_depth.len()];
    while out.len() < n {
        let before = out.len();
        for (d, bucket) in by_depth.iter().enumerate() {
            if out.len() < n && cursor[d] < bucket.len() {
                out.push(bucket[cursor[d]]);
                cursor[d] += 1;
            }
        }
        if out.len() == before {
            break;
        }
    }
    out.sort_unstable();
    out
}

/// `V(s)` of a model at the given states.
pub fn state_values(
    tree: &StateTree,
    model: &PolicyModel,
    reference: &PolicyTable,
    states: &[usize],
    beta: f64,
    form: ValueForm,
) -> Vec<f64> {
    states
        .iter()
        .map(|&s| {
            let nt = tree.nt_index(s).expect("probe states are non-terminal");
            logit_value(form, beta, reference.row(nt), &model.logits_at(tree, s))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueRanking {
    pub probe_states: Vec<usize>,
    pub steps: Vec<usize>,
    /// `V(s)` per checkpoint and probe state.
    pub values: Vec<Vec<f64>>,
    /// Unscaled, unweighted `log Σ exp(l)` per checkpoint and probe state.
    pub raw_lse: Vec<Vec<f64>>,
    /// Probe states ordered by decreasing `V`, per checkpoint.
    pub rankings: Vec<Vec<usize>>,
    pub kendall: Vec<Vec<f64>>,
}

/// Rank probe states by `V` in every checkpoint and correlate the rankings.
pub fn value_ranking_probe(
    exec: Exec,
    tree: &StateTree,
    checkpoints: &[Checkpoint],
    reference: &PolicyTable,
    probe_states: &[usize],
    beta: f64,
    form: ValueForm,
) -> Result<ValueRanking> {
    if checkpoints.is_empty() {
        return Err(Error::MissingCheckpoint("no checkpoints given".into()));
    }
    if probe_states.len() < 2 {
        return Err(Error::TooFew {
            needed: 2,
            got: probe_states.len(),
        });
    }
    let values = exec.map_slice(checkpoints, |c| state_values(tree, &c.model, reference, probe_states, beta, form));
    let raw_lse = exec.map_slice(checkpoints, |c| {
        probe_states.iter().map(|&s| logsumexp(&c.model.logits_at(tree, s))).collect::<Vec<_>>()
    });
    let rankings = values
        .iter()
        .map(|v| {
            let mut order: Vec<usize> = (0..v.len()).collect();
            order.sort_by(|&i, &j| v[j].total_cmp(&v[i]).then(i.cmp(&j)));
            order.into_iter().map(|i| probe_states[i]).collect()
        })
        .collect();
    let n = checkpoints.len();
    let mut kendall = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let t = kendall_tau(&values[i], &values[j])?;
            kendall[i][j] = t;
            kendall[j][i] = t;
        }
    }
    Ok(ValueRanking {
        probe_states: probe_states.to_vec(),
        steps: checkpoints.iter().map(|c| c.step).collect(),
        values,
        raw_lse,
        rankings,
        kendall,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoEvalPoint {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Exact expected return under the true reward, when one is given.
    pub expected_return: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoEvalTrace {
    pub points: Vec<DpoEvalPoint>,
    /// Pearson correlation between loss and expected return.
    pub correlation: Option<f64>,
}

pub fn dpo_eval_probe(
    exec: Exec,
    mdp: &TokenMdp,
    checkpoints: &[Checkpoint],
    reference: &PolicyTable,
    eval_pairs: &[ResolvedPair],
    beta: f64,
    task_reward: Option<&RewardTable>,
) -> DpoEvalTrace {
    let tree = mdp.tree();
    let points: Vec<DpoEvalPoint> = exec.map_slice(checkpoints, |c| {
        let (loss, accuracy) = dpo_eval(tree, &c.model, reference, beta, eval_pairs);
        DpoEvalPoint {
            step: c.step,
            loss,
            accuracy,
            expected_return: task_reward.map(|r| expected_return(mdp, r, &c.model.table(tree))),
        }
    });
    let correlation = if task_reward.is_some() && points.len() >= 2 {
        let xs: Vec<f64> = points.iter().map(|p| p.loss).collect();
        let ys: Vec<f64> = points.iter().filter_map(|p| p.expected_return).collect();
        pearson(&xs, &ys)
    } else {
        None
    };
    DpoEvalTrace { points, correlation }
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct V0Trace {
    pub steps: Vec<usize>,
    /// `values[p][k]`: `V(s₀)` of prompt `p` at checkpoint `k`.
    pub values: Vec<Vec<f64>>,
    /// First step at which `V(s₀)` is within ±5% of its final value.
    pub entry_step: Vec<usize>,
    /// First step after which it stays within that band.
    pub settle_step: Vec<usize>,
}

pub const V0_BAND: f64 = 0.05;

pub fn v0_trace_probe(
    mdp: &TokenMdp,
    checkpoints: &[Checkpoint],
    reference: &PolicyTable,
    beta: f64,
) -> Result<V0Trace> {
    if checkpoints.is_empty() {
        return Err(Error::MissingCheckpoint("no checkpoints given".into()));
    }
    let tree = mdp.tree();
    let roots: Vec<usize> = (0..tree.n_prompts()).map(|p| tree.root(p)).collect();
    let per_ckpt: Vec<Vec<f64>> = checkpoints
        .iter()
        .map(|c| state_values(tree, &c.model, reference, &roots, beta, ValueForm::ReferenceWeighted))
        .collect();
    let steps: Vec<usize> = checkpoints.iter().map(|c| c.step).collect();
    let values: Vec<Vec<f64>> = (0..roots.len()).map(|p| per_ckpt.iter().map(|v| v[p]).collect()).collect();
    let mut entry_step = Vec::new();
    let mut settle_step = Vec::new();
    for trace in &values {
        let fin = *trace.last().unwrap();
        let inside = |v: f64| (v - fin).abs() <= V0_BAND * fin.abs();
        let entry = trace.iter().position(|&v| inside(v)).unwrap_or(trace.len() - 1);
        let settle = trace
            .iter()
            .rposition(|&v| !inside(v))
            .map_or(0, |k| (k + 1).min(trace.len() - 1));
        entry_step.push(steps[entry]);
        settle_step.push(steps[settle]);
    }
    Ok(V0Trace {
        steps,
        values,
        entry_step,
        settle_step,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    /// `(|ΔC|, |ΔV|)` per state pair.
    pub pairs: Vec<(f64, f64)>,
    /// Fraction of pairs with `|ΔC| < |ΔV|`.
    pub fraction: f64,
}

/// Compare offset differences against value differences over state pairs.
pub fn value_dominance_probe(
    tree: &StateTree,
    logits: &[f64],
    sol: &SoftSolution,
    state_pairs: &[(usize, usize)],
    tau: f64,
    beta: f64,
) -> DominanceReport {
    let c = logits_q_probe(tree, logits, sol, tau, beta).c_value;
    let vocab = tree.vocab();
    let v = |s: usize| {
        let nt = tree.nt_index(s).expect("non-terminal");
        logit_value(sol.form, beta, sol.reference.row(nt), &logits[nt * vocab..(nt + 1) * vocab])
    };
    let pairs: Vec<(f64, f64)> = state_pairs
        .iter()
        .map(|&(a, b)| {
            let ca = c[tree.nt_index(a).expect("non-terminal")];
            let cb = c[tree.nt_index(b).expect("non-terminal")];
            ((ca - cb).abs(), (v(a) - v(b)).abs())
        })
        .collect();
    let hits = pairs.iter().filter(|(dc, dv)| dc < dv).count();
    let fraction = if pairs.is_empty() {
        0.0
    } else {
        hits as f64 / pairs.len() as f64
    };
    DominanceReport { pairs, fraction }
}

/// All unordered pairs of a state list.
pub fn all_pairs(states: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..states.len() {
        for j in i + 1..states.len() {
            out.push((states[i], states[j]));
        }
    }
    out
}

/// Everything `probe` emits for one set of checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub c_spread: Vec<f64>,
    pub c_value: Vec<f64>,
    pub value_ranking: ValueRanking,
    pub v0_trace: V0Trace,
    pub dpo_eval_trace: Option<DpoEvalTrace>,
    pub value_dominance: DominanceReport,
}

impl ProbeReport {
    pub fn kendall_csv(&self) -> String {
        let k = &self.value_ranking.kendall;
        let mut out = String::from("checkpoint");
        for step in &self.value_ranking.steps {
            write!(out, ",step_{step}").unwrap();
        }
        out.push('\n');
        for (row, step) in k.iter().zip(&self.value_ranking.steps) {
            write!(out, "step_{step}").unwrap();
            for v in row {
                write!(out, ",{v:.17e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn v0_csv(&self) -> String {
        let mut out = String::from("step,prompt,v0\n");
        for (p, trace) in self.v0_trace.values.iter().enumerate() {
            for (step, v) in self.v0_trace.steps.iter().zip(trace) {
                writeln!(out, "{step},{p},{v:.17e}").unwrap();
            }
        }
        out
    }

    pub fn dpo_csv(&self) -> String {
        let mut out = String::from("step,loss,accuracy,expected_return\n");
        for p in self.dpo_eval_trace.iter().flat_map(|t| &t.points) {
            let ret = p.expected_return.map(|r| format!("{r:.17e}")).unwrap_or_default();
            writeln!(out, "{},{:.17e},{:.17e},{ret}", p.step, p.loss, p.accuracy).unwrap();
        }
        out
    }

    /// Ten equal-width bins over `[0, max c_spread]`.
    pub fn c_spread_histogram_csv(&self) -> String {
        let bins = 10;
        let max = self.c_spread.iter().copied().fold(0.0, f64::max);
        let width = if max > 0.0 { max / bins as f64 } else { 1.0 };
        let mut counts = vec![0usize; bins];
        for &c in &self.c_spread {
            let b = ((c / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let mut out = String::from("lower,upper,count\n");
        for (i, n) in counts.iter().enumerate() {
            writeln!(out, "{:.17e},{:.17e},{n}", i as f64 * width, (i + 1) as f64 * width).unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kendall_examples() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let rev = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert_eq!(kendall_tau(&a, &a).unwrap(), 1.0);
        assert_eq!(kendall_tau(&a, &rev).unwrap(), -1.0);
        let t = kendall_tau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((t - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn kendall_errors() {
        assert!(matches!(kendall_tau(&[1.0, 2.0], &[1.0]), Err(Error::LengthMismatch { .. })));
        assert!(matches!(kendall_tau(&[1.0], &[1.0]), Err(Error::TooFew { .. })));
    }

    #[test]
    fn ties_contribute_zero() {
        assert_eq!(kendall_tau(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn probe_states_cover_depths() {
        let tree = StateTree::build(3, 3, 1, None, 1000).unwrap();
        let states = select_probe_states(&tree, 10, 7);
        assert_eq!(states.len(), 10);
        for d in 0..3 {
            assert!(states.iter().any(|&s| tree.depth(s) == d) || d == 0);
        }
        assert_eq!(states, select_probe_states(&tree, 10, 7));
    }
}
