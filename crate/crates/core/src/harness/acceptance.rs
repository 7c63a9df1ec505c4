//! The acceptance suite: thirteen self-contained property experiments.

use std::collections::HashMap;
use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::divergence::{builtin, conjugate_check, GridSpec, PEARSON_CHI2, SQUARED_HELLINGER, TOTAL_VARIATION};
use crate::error::Result;
use crate::exec::Exec;
use crate::harness::oracle::{enumerate_returns, lambda_rule, monte_carlo_occupancy};
use crate::loss::{build_loss, dpo_pair_loss, nll, resolve_demos, resolve_pairs, ExampleLoss, LogitView, SftLoss};
use crate::mdp::{
    build_preference_pairs, exhaustive_demonstrations, occupancy_on, sample_demonstrations, RewardSpec, StateTree,
    TokenMdp,
};
use crate::policy::{PolicyModel, PolicyTable};
use crate::probes::{logits_q_probe, select_probe_states, v0_trace_probe, value_ranking_probe};
use crate::soft_rl::{implicit_reward, solve_soft, verify_fixed_point, ValueForm};
use crate::train::{
    dpo_batch, finite_difference_check, multi_objective_run_with, run_sft, sample_indices, sft_batch, Objective,
    Scripted, TrainConfig, TrainContext, TrainRun,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    AtMost,
    AtLeast,
    Above,
}

impl Relation {
    fn holds(self, measured: f64, bound: f64) -> bool {
        match self {
            Relation::AtMost => measured <= bound,
            Relation::AtLeast => measured >= bound,
            Relation::Above => measured > bound,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Relation::AtMost => "<=",
            Relation::AtLeast => ">=",
            Relation::Above => ">",
        }
    }
}

/// One measured quantity against its bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub label: String,
    pub measured: f64,
    pub bound: f64,
    pub relation: Relation,
    pub passed: bool,
}

impl Check {
    pub fn new(label: impl Into<String>, measured: f64, relation: Relation, bound: f64) -> Self {
        Check {
            label: label.into(),
            measured,
            bound,
            relation,
            passed: relation.holds(measured, bound),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: String,
    pub checks: Vec<Check>,
    pub runtime_s: f64,
    pub runtime_limit_s: f64,
    pub passed: bool,
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:02} {}:",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name
        )?;
        for (i, c) in self.checks.iter().enumerate() {
            let sep = if i == 0 { " " } else { "; " };
            write!(f, "{sep}{} = {:.6e} {} {:e}", c.label, c.measured, c.relation.symbol(), c.bound)?;
        }
        write!(f, " ({:.2}s / {}s)", self.runtime_s, self.runtime_limit_s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptReport {
    pub results: Vec<CriterionResult>,
    pub total_runtime_s: f64,
}

impl AcceptReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn get(&self, id: u8) -> Option<&CriterionResult> {
        self.results.iter().find(|r| r.id == id)
    }
}

impl fmt::Display for AcceptReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            writeln!(f, "{r}")?;
        }
        let n = self.results.iter().filter(|r| r.passed).count();
        write!(
            f,
            "{n}/{} criteria passed in {:.1}s",
            self.results.len(),
            self.total_runtime_s
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AcceptOptions {
    pub exec: Exec,
    /// Perturb one Q entry of every solution before the fixed-point check.
    pub inject_q_perturbation: bool,
    /// Restrict to these criterion ids (all when empty).
    pub only: Vec<u8>,
}

pub const CRITERIA: [(u8, &str, f64); 13] = [
    (1, "fixed-point validity", 10.0),
    (2, "implicit reward round trip", 10.0),
    (3, "logits as Q", 60.0),
    (4, "tv loss equals scaled mle", 30.0),
    (5, "reference term liveness", 10.0),
    (6, "conjugate duality", 5.0),
    (7, "gradient correctness", 30.0),
    (8, "occupancy matching", 60.0),
    (9, "lambda rule", 1.0),
    (10, "dpo identities and occupancy sampling", 30.0),
    (11, "kendall tau across shards", 120.0),
    (12, "v0 convergence", 120.0),
    (13, "smaller learning rate stays closer", 120.0),
];

pub fn run_acceptance(opts: &AcceptOptions) -> Result<AcceptReport> {
    let start = Instant::now();
    let mut results = Vec::new();
    let mut shards: Option<Vec<ShardRep>> = None;
    for (id, name, limit) in CRITERIA {
        if !opts.only.is_empty() && !opts.only.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let checks = match id {
            1 => c01_fixed_point(opts)?,
            2 => c02_round_trip()?,
            3 => c03_logits_as_q()?,
            4 => c04_tv_is_mle(opts.exec)?,
            5 => c05_reference_liveness()?,
            6 => c06_duality(),
            7 => c07_gradients()?,
            8 => c08_matching(opts.exec)?,
            9 => c09_lambda()?,
            10 => c10_dpo_and_sampling(opts.exec)?,
            11 | 12 => {
                if shards.is_none() {
                    shards = Some(shard_experiment(opts.exec)?);
                }
                let reps = shards.as_ref().unwrap();
                if id == 11 {
                    c11_kendall(reps)
                } else {
                    c12_v0(reps)
                }
            }
            13 => c13_small_lr(opts.exec)?,
            _ => unreachable!(),
        };
        let runtime_s = t.elapsed().as_secs_f64();
        let passed = checks.iter().all(|c| c.passed) && runtime_s <= limit;
        results.push(CriterionResult {
            id,
            name: name.to_string(),
            checks,
            runtime_s,
            runtime_limit_s: limit,
            passed,
        });
    }
    Ok(AcceptReport {
        results,
        total_runtime_s: start.elapsed().as_secs_f64(),
    })
}

/// A random small instance for the solver criteria.
pub struct Instance {
    pub mdp: TokenMdp,
    pub beta: f64,
    pub reference: PolicyTable,
}

pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);
    let vocab = rng.gen_range(2..=5);
    let horizon = rng.gen_range(1..=4);
    let n_prompts = rng.gen_range(1..=2);
    let gamma = [1.0, 0.9, 0.5][rng.gen_range(0..3)];
    let eos = rng.gen_bool(0.3).then_some(vocab as u32 - 1);
    let prompts = (0..n_prompts as u32).map(|p| vec![p]).collect();
    let mut mdp = TokenMdp::new(vocab, horizon, prompts, eos, gamma, 10_000).expect("small instance");
    let reward = RewardSpec::Uniform {
        seed,
        low: -1.0,
        high: 1.0,
    }
    .resolve(mdp.tree())
    .expect("valid spec");
    mdp.set_reward(reward);
    let beta = if seed % 2 == 0 { 0.1 } else { 1.0 };
    let reference = PolicyTable::random(mdp.tree(), 1.0, seed.wrapping_add(1));
    Instance { mdp, beta, reference }
}

fn uniform_mdp(vocab: usize, horizon: usize, n_prompts: usize, gamma: f64, seed: u64) -> TokenMdp {
    TokenMdp::random(vocab, horizon, n_prompts, gamma, (-1.0, 1.0), seed).expect("small instance")
}

/// Add sparse rows into a dense `n_nonterminal × vocab` vector.
pub fn dense(tree: &StateTree, ex: &ExampleLoss) -> Vec<f64> {
    let v = tree.vocab();
    let mut out = vec![0.0; tree.n_nonterminal() * v];
    for (nt, row) in &ex.grad {
        for (o, g) in out[nt * v..(nt + 1) * v].iter_mut().zip(row) {
            *o += g;
        }
    }
    out
}

fn ref_model(tree: &StateTree, reference: &PolicyTable) -> PolicyModel {
    PolicyModel::tabular_from_logits(tree, reference.probs().iter().map(|p| p.ln()).collect()).expect("shape")
}

fn c01_fixed_point(opts: &AcceptOptions) -> Result<Vec<Check>> {
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let inst = random_instance(seed);
        let mut sol = solve_soft(&inst.mdp, inst.mdp.reward(), inst.beta, &inst.reference)?;
        if opts.inject_q_perturbation {
            sol.q[0] += 1e-3;
        }
        worst = worst.max(verify_fixed_point(&sol, &inst.mdp, inst.mdp.reward()).max());
    }
    Ok(vec![Check::new("max residual", worst, Relation::AtMost, 1e-8)])
}

fn c02_round_trip() -> Result<Vec<Check>> {
    let mut worst: f64 = 0.0;
    let mut missing = 0usize;
    for seed in 0..50 {
        let inst = random_instance(seed);
        let sol = solve_soft(&inst.mdp, inst.mdp.reward(), inst.beta, &inst.reference)?;
        let rep = implicit_reward(&inst.mdp, &sol.policy(), &inst.reference, inst.beta, &sol.v)?;
        let truth: HashMap<(usize, Vec<u32>), f64> = enumerate_returns(&inst.mdp, inst.mdp.reward())
            .into_iter()
            .map(|(p, r, ret)| ((p, r), ret))
            .collect();
        if truth.len() != rep.sequences.len() {
            missing += truth.len().abs_diff(rep.sequences.len());
        }
        for s in &rep.sequences {
            match truth.get(&(s.prompt_id, s.response.clone())) {
                Some(ret) => worst = worst.max((s.reward - ret).abs()),
                None => missing += 1,
            }
        }
    }
    Ok(vec![
        Check::new("max |r_hat - return|", worst, Relation::AtMost, 1e-8),
        Check::new("unmatched sequences", missing as f64, Relation::AtMost, 0.0),
    ])
}

/// Full-batch gradient descent on a fixed loss until the parameter-gradient
/// norm drops below `tol`. Returns the final norm and step count.
fn descend(
    tree: &StateTree,
    model: &mut PolicyModel,
    reference: &PolicyTable,
    loss: &SftLoss,
    demos: &[crate::loss::ResolvedDemo],
    lr: f64,
    tol: f64,
    max_steps: usize,
) -> (f64, usize) {
    let mut norm = f64::INFINITY;
    for step in 0..max_steps {
        let logits = model.logits_table(tree);
        let view = LogitView {
            tree,
            logits: &logits,
            temperature: model.temperature,
        };
        let batch = sft_batch(Exec::Sequential, &view, reference, loss, demos);
        let g = model.backward(tree, &batch.logit_grad);
        norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < tol {
            return (norm, step);
        }
        for (p, d) in model.params_mut().iter_mut().zip(&g) {
            *p -= lr * d;
        }
    }
    (norm, max_steps)
}

fn c03_logits_as_q() -> Result<Vec<Check>> {
    // constructed logits
    let mut spread: f64 = 0.0;
    let mut recover: f64 = 0.0;
    for seed in 0..20 {
        let inst = random_instance(100 + seed);
        let sol = solve_soft(&inst.mdp, inst.mdp.reward(), inst.beta, &inst.reference)?;
        let tree = inst.mdp.tree();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tau = [0.5, 1.0, 2.0][seed as usize % 3];
        let consts: Vec<f64> = (0..tree.n_nonterminal()).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let v = tree.vocab();
        let logits: Vec<f64> = (0..tree.n_nonterminal() * v)
            .map(|i| tau / inst.beta * sol.q[i] + consts[i / v])
            .collect();
        let probe = logits_q_probe(tree, &logits, &sol, tau, inst.beta);
        spread = spread.max(probe.max_spread());
        for (c, k) in probe.c_value.iter().zip(&consts) {
            recover = recover.max((c - k).abs());
        }
    }
    // trained logits
    let beta = 1.0;
    let mdp = uniform_mdp(3, 2, 1, 1.0, 11);
    let tree = mdp.tree();
    let reference = PolicyTable::uniform(tree);
    let sol = solve_soft(&mdp, mdp.reward(), beta, &reference)?;
    let demos = resolve_demos(&mdp, &exhaustive_demonstrations(&mdp, &sol.policy()))?;
    let loss = SftLoss::Divergence(build_loss(TOTAL_VARIATION, beta));
    let mut model = ref_model(tree, &reference);
    let (norm, _) = descend(tree, &mut model, &reference, &loss, &demos, 2.0, 1e-6, 200_000);
    let trained = logits_q_probe(tree, &model.logits_table(tree), &sol, model.temperature, beta);
    Ok(vec![
        Check::new("constructed c_spread", spread, Relation::AtMost, 1e-12),
        Check::new("constructed |c - const|", recover, Relation::AtMost, 1e-12),
        Check::new("trained grad norm", norm, Relation::AtMost, 1e-6),
        Check::new("trained c_spread", trained.max_spread(), Relation::AtMost, 1e-3),
    ])
}

fn c04_tv_is_mle(exec: Exec) -> Result<Vec<Check>> {
    let mut grad_diff: f64 = 0.0;
    for draw in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + draw);
        let mdp = uniform_mdp(rng.gen_range(2..=4), rng.gen_range(1..=3), rng.gen_range(1..=2), 1.0, draw);
        let tree = mdp.tree();
        let reference = PolicyTable::random(tree, 1.0, draw + 1);
        let model = if draw % 2 == 0 {
            PolicyModel::random_tabular(tree, 2.0, draw)
        } else {
            PolicyModel::featurized(tree, 6, 0.7, draw)
        };
        let beta = rng.gen_range(0.01..2.0);
        let logits = model.logits_table(tree);
        let view = LogitView {
            tree,
            logits: &logits,
            temperature: model.temperature,
        };
        let terminals: Vec<usize> = tree.terminal_states().collect();
        let s = terminals[rng.gen_range(0..terminals.len())];
        let tv = dense(tree, &build_loss(TOTAL_VARIATION, beta).evaluate(&view, &reference, s));
        let ml = dense(tree, &nll(&view, s));
        for (a, b) in tv.iter().zip(&ml) {
            grad_diff = grad_diff.max((a - beta * b).abs());
        }
    }
    let mut traj_diff: f64 = 0.0;
    for rep in 0..4u64 {
        let mdp = uniform_mdp(3, 3, 2, 1.0, 40 + rep);
        let tree = mdp.tree();
        let reference = PolicyTable::random(tree, 1.0, rep);
        let demos = sample_demonstrations(&mdp, &PolicyTable::random(tree, 2.0, 77 + rep), 60, rep);
        let model = if rep % 2 == 0 {
            PolicyModel::random_tabular(tree, 1.0, rep)
        } else {
            PolicyModel::featurized(tree, 8, 0.5, rep)
        };
        let beta = 0.3;
        let base = TrainConfig {
            beta,
            steps: 60,
            checkpoint_every: 1,
            batch_size: if rep < 2 { 0 } else { 16 },
            seed: rep,
            ..TrainConfig::default()
        };
        let tv_cfg = TrainConfig {
            objective: Objective::FSft,
            learning_rate: 0.5,
            ..base.clone()
        };
        let mle_cfg = TrainConfig {
            objective: Objective::Mle,
            learning_rate: 0.5 * beta,
            ..base
        };
        let ctx = TrainContext::new(&mdp, &reference, &tv_cfg)?.with_exec(exec);
        let a = run_sft(&ctx, &model, &demos, &tv_cfg)?;
        let b = run_sft(&ctx, &model, &demos, &mle_cfg)?;
        for (x, y) in a.checkpoints.iter().zip(&b.checkpoints) {
            for (p, q) in x.model.params().iter().zip(y.model.params()) {
                traj_diff = traj_diff.max((p - q).abs());
            }
        }
        if a.checkpoints.len() != b.checkpoints.len() {
            traj_diff = f64::INFINITY;
        }
    }
    Ok(vec![
        Check::new("max |g_tv - beta g_mle|", grad_diff, Relation::AtMost, 1e-10),
        Check::new("max trajectory gap", traj_diff, Relation::AtMost, 1e-8),
    ])
}

fn c05_reference_liveness() -> Result<Vec<Check>> {
    let mut live_pearson = f64::INFINITY;
    let mut live_hellinger = f64::INFINITY;
    let mut tv_change: f64 = 0.0;
    for draw in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + draw);
        let mdp = uniform_mdp(rng.gen_range(2..=4), rng.gen_range(1..=3), 1, 1.0, draw);
        let tree = mdp.tree();
        let ref_a = PolicyTable::random(tree, 1.0, draw);
        let ref_b = PolicyTable::random(tree, 1.0, draw + 1000);
        let model = PolicyModel::random_tabular(tree, 1.0, draw + 7);
        let logits = model.logits_table(tree);
        let view = LogitView {
            tree,
            logits: &logits,
            temperature: 1.0,
        };
        let terminals: Vec<usize> = tree.terminal_states().collect();
        let s = terminals[rng.gen_range(0..terminals.len())];
        let beta = rng.gen_range(0.1..1.0);
        let change = |spec| {
            let l = build_loss(spec, beta);
            let ga = dense(tree, &l.evaluate(&view, &ref_a, s));
            let gb = dense(tree, &l.evaluate(&view, &ref_b, s));
            ga.iter().zip(&gb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        };
        live_pearson = live_pearson.min(change(PEARSON_CHI2));
        live_hellinger = live_hellinger.min(change(SQUARED_HELLINGER));
        tv_change = tv_change.max(change(TOTAL_VARIATION));
    }
    Ok(vec![
        Check::new("min pearson change", live_pearson, Relation::Above, 1e-6),
        Check::new("min hellinger change", live_hellinger, Relation::Above, 1e-6),
        Check::new("max tv change", tv_change, Relation::AtMost, 1e-12),
    ])
}

fn c06_duality() -> Vec<Check> {
    let grid = GridSpec::default();
    builtin()
        .iter()
        .map(|spec| Check::new(spec.name, conjugate_check(spec, &grid), Relation::AtMost, spec.conjugate_bound))
        .collect()
}

#[derive(Clone, Copy)]
enum GradObjective {
    Sft(&'static str),
    Dpo,
    Multi,
}

fn c07_gradients() -> Result<Vec<Check>> {
    let objectives = [
        ("mle", GradObjective::Sft("mle")),
        ("pearson", GradObjective::Sft("pearson_chi2")),
        ("hellinger", GradObjective::Sft("squared_hellinger")),
        ("dpo", GradObjective::Dpo),
        ("multi", GradObjective::Multi),
    ];
    let mdp = uniform_mdp(3, 3, 2, 1.0, 70);
    let tree = mdp.tree();
    let reference = PolicyTable::random(tree, 1.0, 71);
    let demos = resolve_demos(&mdp, &sample_demonstrations(&mdp, &PolicyTable::random(tree, 1.5, 72), 8, 73))?;
    let pairs = resolve_pairs(&mdp, &build_preference_pairs(&mdp, &reference, 8, 74)?)?;
    let beta = 0.5;
    let lambda = 0.7;
    let mut checks = Vec::new();
    for (kind_name, template) in [
        ("tabular", PolicyModel::random_tabular(tree, 1.0, 75)),
        ("featurized", PolicyModel::featurized(tree, 8, 0.5, 76)),
    ] {
        for (name, obj) in objectives {
            let sft = |spec: &str| -> Result<SftLoss> {
                Ok(match spec {
                    "mle" => SftLoss::Mle,
                    other => SftLoss::Divergence(build_loss(crate::divergence::by_name(other)?, beta)),
                })
            };
            let sft_loss = match obj {
                GradObjective::Sft(s) => Some(sft(s)?),
                GradObjective::Multi => Some(sft("total_variation")?),
                GradObjective::Dpo => None,
            };
            let f = |params: &[f64]| {
                let mut m = template.clone();
                m.params_mut().copy_from_slice(params);
                let logits = m.logits_table(tree);
                let view = LogitView {
                    tree,
                    logits: &logits,
                    temperature: m.temperature,
                };
                let mut batch = match sft_loss {
                    Some(l) => sft_batch(Exec::Sequential, &view, &reference, &l, &demos),
                    None => dpo_batch(Exec::Sequential, &view, &reference, beta, &pairs),
                };
                if let GradObjective::Multi = obj {
                    batch.add_scaled(&dpo_batch(Exec::Sequential, &view, &reference, beta, &pairs), lambda);
                }
                (batch.loss, m.backward(tree, &batch.logit_grad))
            };
            let idx = sample_indices(template.n_params(), 60, 78);
            let r = finite_difference_check(f, template.params(), 1e-5, &idx);
            checks.push(Check::new(format!("{name}/{kind_name}"), r.max_rel_error, Relation::AtMost, 1e-4));
        }
    }
    Ok(checks)
}

/// Increases smaller than this are floating-point noise around zero.
const ROUNDOFF: f64 = 1e-12;

fn c08_matching(exec: Exec) -> Result<Vec<Check>> {
    let beta = 1.0;
    let mdp = uniform_mdp(2, 3, 1, 0.9, 8);
    let tree = mdp.tree();
    let reference = PolicyTable::uniform(tree);
    let expert = solve_soft(&mdp, mdp.reward(), beta, &reference)?.policy();
    let demos = exhaustive_demonstrations(&mdp, &expert);
    let cfg = TrainConfig {
        objective: Objective::FSft,
        beta,
        learning_rate: 1.0,
        steps: 5000,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let ctx = TrainContext::new(&mdp, &reference, &cfg)?.with_expert(&expert)?.with_exec(exec);
    let run = run_sft(&ctx, &PolicyModel::random_tabular(tree, 2.0, 8), &demos, &cfg)?;
    let trace: Vec<f64> = run.stream.iter().map(|m| m.d_f.unwrap_or(f64::INFINITY)).collect();
    let increases = trace
        .iter()
        .step_by(100)
        .collect::<Vec<_>>()
        .windows(2)
        .filter(|w| *w[1] > *w[0] + ROUNDOFF)
        .count();
    let first_below = trace.iter().position(|&d| d <= 1e-2).map_or(f64::INFINITY, |k| k as f64);
    Ok(vec![
        Check::new("initial d_tv", trace[0], Relation::Above, 1e-2),
        Check::new("final d_tv", *trace.last().unwrap(), Relation::AtMost, 1e-2),
        Check::new("steps to 1e-2", first_below, Relation::AtMost, 5000.0),
        Check::new("window increases", increases as f64, Relation::AtMost, 0.0),
    ])
}

fn c09_lambda() -> Result<Vec<Check>> {
    let mdp = uniform_mdp(2, 2, 1, 1.0, 9);
    let tree = mdp.tree();
    let reference = PolicyTable::uniform(tree);
    let demos = sample_demonstrations(&mdp, &reference, 8, 1);
    let pairs = build_preference_pairs(&mdp, &reference, 8, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let random: Vec<f64> = (0..25).map(|_| rng.gen_range(0.7..1.0)).collect();
    let scripts: Vec<(Vec<f64>, usize)> = vec![
        (vec![0.90, 0.855, 0.1, 0.2, 0.3, 0.86, 0.95, 0.84, 0.851, 0.86], 1),
        (vec![0.1, 0.2, 0.3], 10),
        (random, 3),
    ];
    let mut mismatches = 0usize;
    let mut not_power = 0usize;
    for (accs, window) in &scripts {
        let mut cfg = TrainConfig {
            objective: Objective::MultiObjective,
            steps: accs.len() * window,
            learning_rate: 0.1,
            checkpoint_every: 0,
            log_every: 1000,
            ..TrainConfig::default()
        };
        cfg.lambda.eval_window = *window;
        let ctx = TrainContext::new(&mdp, &reference, &cfg)?;
        let run: TrainRun = multi_objective_run_with(
            &ctx,
            &ref_model(tree, &reference),
            &demos,
            &pairs,
            &cfg,
            &mut Scripted(accs),
        )?;
        let init = cfg.lambda.lambda_init;
        let expected = lambda_rule(init, cfg.lambda.target_acc, cfg.lambda.delta, accs);
        if run.lambda_trace != expected {
            mismatches += 1;
        }
        not_power += run
            .lambda_trace
            .iter()
            .filter(|&&l| {
                let k = (l / init).log2();
                k != k.round() || init * 2f64.powi(k as i32) != l
            })
            .count();
    }
    Ok(vec![
        Check::new("trace mismatches", mismatches as f64, Relation::AtMost, 0.0),
        Check::new("non power-of-two values", not_power as f64, Relation::AtMost, 0.0),
    ])
}

fn c10_dpo_and_sampling(exec: Exec) -> Result<Vec<Check>> {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let inst = random_instance(200 + seed);
        let tree = inst.mdp.tree();
        let Ok(pairs) = build_preference_pairs(&inst.mdp, &inst.reference, 20, seed) else {
            continue;
        };
        let pairs = resolve_pairs(&inst.mdp, &pairs)?;
        let model = ref_model(tree, &inst.reference);
        let logits = model.logits_table(tree);
        let view = LogitView {
            tree,
            logits: &logits,
            temperature: 1.0,
        };
        for p in &pairs {
            let l = dpo_pair_loss(&view, &inst.reference, inst.beta, p.chosen, p.rejected);
            worst = worst.max((l.loss.value - std::f64::consts::LN_2).abs());
        }
    }
    let gamma = 0.8;
    let mdp = uniform_mdp(2, 2, 1, gamma, 10);
    let policy = PolicyTable::random(mdp.tree(), 1.0, 10);
    let exact = occupancy_on(mdp.tree(), gamma, &policy)?;
    let mc = monte_carlo_occupancy(exec, &mdp, &policy, gamma, 200_000, 10);
    let mut z: f64 = 0.0;
    let absorbed = exact.absorbed_mass();
    let entries = exact
        .mu
        .iter()
        .zip(mc.mean.iter().zip(&mc.stderr))
        .chain(std::iter::once((&absorbed, (&mc.absorbed_mean, &mc.absorbed_stderr))));
    for (e, (m, s)) in entries {
        let d = (e - m).abs();
        z = z.max(if *s > 0.0 { d / s } else if d <= 1e-12 { 0.0 } else { f64::INFINITY });
    }
    Ok(vec![
        Check::new("max |loss - ln 2|", worst, Relation::AtMost, 1e-12),
        Check::new("max occupancy z-score", z, Relation::AtMost, 3.0),
    ])
}

/// One repetition of the two-shard experiment.
#[derive(Debug, Clone)]
pub struct ShardRep {
    pub tau: f64,
    pub steps: usize,
    /// First step within ±5% of the final `V(s₀)`, per run and prompt.
    pub entry_steps: Vec<usize>,
    pub v0_traces: Vec<Vec<f64>>,
}

pub const SHARD_REPS: usize = 20;

pub fn shard_experiment(exec: Exec) -> Result<Vec<ShardRep>> {
    exec.map_range(SHARD_REPS, |rep| shard_rep(rep as u64)).into_iter().collect()
}

fn shard_rep(rep: u64) -> Result<ShardRep> {
    let beta = 1.0;
    let mdp = uniform_mdp(3, 3, 2, 1.0, 1100 + rep);
    let tree = mdp.tree();
    let reference = PolicyTable::uniform(tree);
    let expert = solve_soft(&mdp, mdp.reward(), beta, &reference)?.policy();
    let demos = sample_demonstrations(&mdp, &expert, 400, rep);
    let (half_a, half_b) = demos.split_at(demos.len() / 2);
    let cfg = TrainConfig {
        objective: Objective::FSft,
        beta,
        learning_rate: 1.0,
        steps: 400,
        checkpoint_every: 10,
        log_every: 10,
        seed: rep,
        ..TrainConfig::default()
    };
    let ctx = TrainContext::new(&mdp, &reference, &cfg)?.with_exec(Exec::Sequential);
    let init = ref_model(tree, &reference);
    let run_a = run_sft(&ctx, &init, half_a, &cfg)?;
    let run_b = run_sft(&ctx, &init, half_b, &cfg)?;
    let probe_states = select_probe_states(tree, 20, rep);
    let finals = [
        run_a.checkpoints.last().unwrap().clone(),
        run_b.checkpoints.last().unwrap().clone(),
    ];
    let ranking = value_ranking_probe(
        Exec::Sequential,
        tree,
        &finals,
        &reference,
        &probe_states,
        beta,
        ValueForm::ReferenceWeighted,
    )?;
    let mut entry_steps = Vec::new();
    let mut v0_traces = Vec::new();
    for run in [&run_a, &run_b] {
        let t = v0_trace_probe(&mdp, &run.checkpoints, &reference, beta)?;
        entry_steps.extend(t.entry_step);
        v0_traces.extend(t.values);
    }
    Ok(ShardRep {
        tau: ranking.kendall[0][1],
        steps: cfg.steps,
        entry_steps,
        v0_traces,
    })
}

fn c11_kendall(reps: &[ShardRep]) -> Vec<Check> {
    let positive = reps.iter().filter(|r| r.tau > 0.0).count();
    let min_tau = reps.iter().map(|r| r.tau).fold(f64::INFINITY, f64::min);
    vec![
        Check::new("reps with tau > 0", positive as f64, Relation::AtLeast, 18.0),
        Check::new("min tau (recorded)", min_tau, Relation::AtLeast, -1.0),
    ]
}

fn c12_v0(reps: &[ShardRep]) -> Vec<Check> {
    let ok = reps
        .iter()
        .filter(|r| r.entry_steps.iter().all(|&s| 2 * s <= r.steps))
        .count();
    vec![Check::new("reps converged by half-way", ok as f64, Relation::AtLeast, 16.0)]
}

/// KL at the first step whose loss is at or below `threshold`.
fn kl_at_threshold(run: &TrainRun, threshold: f64) -> Option<f64> {
    run.stream.iter().find(|m| m.loss <= threshold).map(|m| m.kl)
}

pub fn small_lr_rep(rep: u64, exec: Exec) -> Result<Option<(f64, f64)>> {
    let beta = 1.0;
    let mdp = uniform_mdp(3, 2, 1, 1.0, 1300 + rep);
    let tree = mdp.tree();
    let reference = PolicyTable::random(tree, 1.0, rep);
    let expert = solve_soft(&mdp, mdp.reward(), beta, &reference)?.policy();
    let demos = sample_demonstrations(&mdp, &expert, 200, rep);
    let large = TrainConfig {
        objective: Objective::FSft,
        beta,
        learning_rate: 1.0,
        steps: 200,
        checkpoint_every: 0,
        seed: rep,
        ..TrainConfig::default()
    };
    let small = TrainConfig {
        learning_rate: large.learning_rate / 4.0,
        steps: large.steps * 4,
        ..large.clone()
    };
    let ctx = TrainContext::new(&mdp, &reference, &large)?.with_exec(exec);
    let init = ref_model(tree, &reference);
    let run_large = run_sft(&ctx, &init, &demos, &large)?;
    let run_small = run_sft(&ctx, &init, &demos, &small)?;
    let threshold = 0.5 * (run_large.stream[0].loss + run_large.final_metrics().loss);
    Ok(kl_at_threshold(&run_small, threshold).zip(kl_at_threshold(&run_large, threshold)))
}

fn c13_small_lr(exec: Exec) -> Result<Vec<Check>> {
    let results: Vec<Option<(f64, f64)>> = exec
        .map_range(20, |rep| small_lr_rep(rep as u64, Exec::Sequential))
        .into_iter()
        .collect::<Result<_>>()?;
    let wins = results.iter().filter(|r| matches!(r, Some((s, l)) if s <= l)).count();
    Ok(vec![Check::new("pairs with kl_small <= kl_large", wins as f64, Relation::AtLeast, 18.0)])
}
