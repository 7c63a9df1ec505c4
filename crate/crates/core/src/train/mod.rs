//! Training loops over tabular and featurized policies.

mod config;
mod gradcheck;
mod kl;
mod schedule;
mod step;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{LambdaConfig, LrSchedule, Objective, TrainConfig};
pub use gradcheck::{finite_difference_check, sample_indices, GradCheck};
pub use kl::{kl_to_reference, kl_to_reference_with, KlConvention};
pub use schedule::{partition, LambdaController};
pub use step::{dpo_batch, dpo_eval, dpo_step, sft_batch, sft_step, BatchGrad, StepOutcome};

use crate::divergence::{by_name, FDivergenceSpec};
use crate::error::Result;
use crate::exec::Exec;
use crate::loss::{resolve_demos, resolve_pairs, ResolvedDemo, ResolvedPair, SftLoss};
use crate::mdp::{f_divergence_between, occupancy_on, Demonstration, OccupancyMeasure, PreferencePair, TokenMdp};
use crate::policy::{PolicyModel, PolicyTable};
use crate::soft_rl::{logit_value, ValueForm};

/// Everything a run needs besides the model and its data.
#[derive(Debug, Clone)]
pub struct TrainContext<'a> {
    pub mdp: &'a TokenMdp,
    pub reference: &'a PolicyTable,
    /// Expert occupancy for the `d_f` metric.
    pub expert: Option<OccupancyMeasure>,
    /// Held-out pairs for the `dpo_eval_loss` metric.
    pub eval_pairs: Vec<ResolvedPair>,
    pub metric_divergence: FDivergenceSpec,
    /// Discount of the occupancy metrics.
    pub metric_gamma: f64,
    pub exec: Exec,
}

impl<'a> TrainContext<'a> {
    pub fn new(mdp: &'a TokenMdp, reference: &'a PolicyTable, cfg: &TrainConfig) -> Result<Self> {
        let metric_gamma = if mdp.gamma() < 1.0 {
            mdp.gamma()
        } else {
            cfg.metric_gamma
        };
        Ok(TrainContext {
            mdp,
            reference,
            expert: None,
            eval_pairs: Vec::new(),
            metric_divergence: by_name(&cfg.divergence)?,
            metric_gamma,
            exec: Exec::default(),
        })
    }

    pub fn with_expert(mut self, expert: &PolicyTable) -> Result<Self> {
        self.expert = Some(occupancy_on(self.mdp.tree(), self.metric_gamma, expert)?);
        Ok(self)
    }

    pub fn with_eval_pairs(mut self, pairs: &[PreferencePair]) -> Result<Self> {
        self.eval_pairs = resolve_pairs(self.mdp, pairs)?;
        Ok(self)
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    /// `D_f(μ_π ∥ μ_E)` of a policy, when an expert is attached.
    pub fn divergence_to_expert(&self, policy: &PolicyTable) -> Result<Option<f64>> {
        match &self.expert {
            None => Ok(None),
            Some(mu_e) => {
                let mu_p = occupancy_on(self.mdp.tree(), self.metric_gamma, policy)?;
                f_divergence_between(&mu_p, mu_e, &self.metric_divergence).map(Some)
            }
        }
    }
}

/// One record of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub step: usize,
    pub stage: String,
    /// Objective of the current stage on its full training data.
    pub loss: f64,
    pub kl: f64,
    pub d_f: Option<f64>,
    /// `V(s₀)` per prompt.
    pub v0: Vec<f64>,
    pub lambda: Option<f64>,
    pub dpo_eval_loss: Option<f64>,
    /// Pair accuracy on the training pairs of the stage.
    pub pair_accuracy: Option<f64>,
}

/// Immutable parameter snapshot with its metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub stage: String,
    pub model: PolicyModel,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub start_step: usize,
    pub end_step: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub checkpoints: Vec<Checkpoint>,
    pub stream: Vec<Metrics>,
    /// λ after each evaluation window, initial value first (multi-objective only).
    pub lambda_trace: Vec<f64>,
    pub stages: Vec<StageRecord>,
    pub final_model: PolicyModel,
}

impl TrainRun {
    pub fn final_metrics(&self) -> &Metrics {
        self.stream.last().expect("a run records its initial metrics")
    }
}

/// `V(s₀)` per prompt from the model's root logits (reference-weighted).
pub fn root_values(mdp: &TokenMdp, model: &PolicyModel, reference: &PolicyTable, beta: f64) -> Vec<f64> {
    let tree = mdp.tree();
    (0..tree.n_prompts())
        .map(|p| {
            let root = tree.root(p);
            let nt = tree.nt_index(root).expect("roots are non-terminal");
            logit_value(ValueForm::ReferenceWeighted, beta, reference.row(nt), &model.logits_at(tree, root))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StageKind {
    Sft,
    Dpo,
    Multi,
}

struct StageData<'d> {
    name: String,
    kind: StageKind,
    demos: &'d [ResolvedDemo],
    pairs: &'d [ResolvedPair],
    steps: usize,
}

/// Where the multi-objective trainer takes its window accuracy from.
pub trait AccuracySource {
    /// Accuracy used for λ update number `window`, given the measured one.
    fn accuracy(&mut self, window: usize, measured: f64) -> f64;
}

/// Uses the measured training-pair accuracy.
pub struct Measured;

impl AccuracySource for Measured {
    fn accuracy(&mut self, _window: usize, measured: f64) -> f64 {
        measured
    }
}

/// Replays a fixed accuracy sequence (repeating its last value).
pub struct Scripted<'s>(pub &'s [f64]);

impl AccuracySource for Scripted<'_> {
    fn accuracy(&mut self, window: usize, measured: f64) -> f64 {
        match self.0 {
            [] => measured,
            xs => xs[window.min(xs.len() - 1)],
        }
    }
}

struct Batcher {
    n: usize,
    size: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        Batcher {
            n,
            size,
            order: (0..n).collect(),
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn full(&self) -> bool {
        self.size == 0 || self.size >= self.n
    }

    /// Indices of the next batch: everything (in order) for full batches,
    /// otherwise consecutive slices of a per-epoch shuffle.
    fn next(&mut self) -> Vec<usize> {
        if self.full() {
            return (0..self.n).collect();
        }
        let mut out = Vec::with_capacity(self.size);
        while out.len() < self.size {
            if self.pos == self.n {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn pick<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

struct Runner<'c, 'a> {
    ctx: &'c TrainContext<'a>,
    cfg: &'c TrainConfig,
    sft: SftLoss,
    step: usize,
    run: TrainRun,
}

impl<'c, 'a> Runner<'c, 'a> {
    fn new(ctx: &'c TrainContext<'a>, cfg: &'c TrainConfig, model: &PolicyModel) -> Result<Self> {
        cfg.validate()?;
        Ok(Runner {
            ctx,
            cfg,
            sft: cfg.sft_loss()?,
            step: 0,
            run: TrainRun {
                checkpoints: Vec::new(),
                stream: Vec::new(),
                lambda_trace: Vec::new(),
                stages: Vec::new(),
                final_model: model.clone(),
            },
        })
    }

    fn metrics(&self, model: &PolicyModel, stage: &StageData, lambda: Option<f64>) -> Result<Metrics> {
        let ctx = self.ctx;
        let tree = ctx.mdp.tree();
        let table = model.table(tree);
        let logits = model.logits_table(tree);
        let view = step::view_of(model, tree, &logits);
        let beta = self.cfg.beta;
        let sft_loss = || sft_batch(ctx.exec, &view, ctx.reference, &self.sft, stage.demos).loss;
        let dpo = || dpo_batch(ctx.exec, &view, ctx.reference, beta, stage.pairs);
        let (loss, pair_accuracy) = match stage.kind {
            StageKind::Sft => (sft_loss(), None),
            StageKind::Dpo => {
                let d = dpo();
                (d.loss, d.accuracy)
            }
            StageKind::Multi => {
                let d = dpo();
                (sft_loss() + lambda.unwrap_or(0.0) * d.loss, d.accuracy)
            }
        };
        let dpo_eval_loss = if ctx.eval_pairs.is_empty() {
            None
        } else {
            Some(dpo_eval(tree, model, ctx.reference, beta, &ctx.eval_pairs).0)
        };
        Ok(Metrics {
            step: self.step,
            stage: stage.name.clone(),
            loss,
            kl: kl_to_reference(ctx.mdp, &table, ctx.reference),
            d_f: ctx.divergence_to_expert(&table)?,
            v0: root_values(ctx.mdp, model, ctx.reference, beta),
            lambda,
            dpo_eval_loss,
            pair_accuracy,
        })
    }

    fn record(&mut self, model: &PolicyModel, stage: &StageData, lambda: Option<f64>, force_ckpt: bool) -> Result<()> {
        let m = self.metrics(model, stage, lambda)?;
        let every = self.cfg.checkpoint_every;
        let ckpt = force_ckpt || (every > 0 && self.step % every == 0);
        let duplicate = self.run.checkpoints.last().is_some_and(|c| c.step == self.step && c.stage == stage.name);
        if ckpt && !duplicate {
            self.run.checkpoints.push(Checkpoint {
                step: self.step,
                stage: stage.name.clone(),
                model: model.clone(),
                metrics: m.clone(),
            });
        }
        self.run.stream.push(m);
        Ok(())
    }

    fn run_stage(
        &mut self,
        model: &mut PolicyModel,
        stage: StageData,
        acc: &mut dyn AccuracySource,
        lambda: &mut Option<LambdaController>,
    ) -> Result<()> {
        let ctx = self.ctx;
        let cfg = self.cfg;
        let tree = ctx.mdp.tree();
        let start = self.step;
        let salt = self.run.stages.len() as u64;
        let mut demo_batches = Batcher::new(stage.demos.len(), cfg.batch_size, cfg.seed ^ (salt << 32));
        let mut pair_batches = Batcher::new(stage.pairs.len(), cfg.batch_size, cfg.seed ^ (salt << 32) ^ 0x9e37);
        let base_lr = match stage.kind {
            StageKind::Dpo => cfg.dpo_lr(),
            _ => cfg.learning_rate,
        };
        if start == 0 {
            self.record(model, &stage, lambda.map(|l| l.lambda), true)?;
        }
        let mut window = 0;
        for k in 0..stage.steps {
            let lr = cfg.lr_schedule.at(base_lr, k, stage.steps);
            let logits = model.logits_table(tree);
            let view = step::view_of(model, tree, &logits);
            let sft_grad = |idx: &[usize]| sft_batch(ctx.exec, &view, ctx.reference, &self.sft, &pick(stage.demos, idx));
            let dpo_grad = |idx: &[usize]| dpo_batch(ctx.exec, &view, ctx.reference, cfg.beta, &pick(stage.pairs, idx));
            let batch = match stage.kind {
                StageKind::Sft => sft_grad(&demo_batches.next()),
                StageKind::Dpo => dpo_grad(&pair_batches.next()),
                StageKind::Multi => {
                    let mut g = sft_grad(&demo_batches.next());
                    let lam = lambda.map_or(0.0, |l| l.lambda);
                    g.add_scaled(&dpo_grad(&pair_batches.next()), lam);
                    g
                }
            };
            if stage.kind != StageKind::Sft {
                if let Some((nt, action)) = model.table(tree).first_zero() {
                    return Err(crate::error::Error::ZeroProbability {
                        state: tree.nt_state(nt),
                        action,
                    });
                }
            }
            step::apply(model, tree, batch, lr, self.step)?;
            self.step += 1;
            if let Some(ctrl) = lambda.as_mut() {
                if (k + 1) % cfg.lambda.eval_window == 0 {
                    let (_, measured) = dpo_eval(tree, model, ctx.reference, cfg.beta, stage.pairs);
                    let a = acc.accuracy(window, measured);
                    window += 1;
                    self.run.lambda_trace.push(ctrl.update(a));
                }
            }
            let last = k + 1 == stage.steps;
            if self.step % cfg.log_every == 0 || last {
                self.record(model, &stage, lambda.map(|l| l.lambda), last)?;
            }
        }
        let metrics = match self.run.stream.last() {
            Some(m) if m.step == self.step && m.stage == stage.name => m.clone(),
            _ => {
                self.record(model, &stage, lambda.map(|l| l.lambda), true)?;
                self.run.stream.last().unwrap().clone()
            }
        };
        self.run.stages.push(StageRecord {
            name: stage.name,
            start_step: start,
            end_step: self.step,
            metrics,
        });
        Ok(())
    }

    fn finish(mut self, model: PolicyModel) -> TrainRun {
        self.run.final_model = model;
        self.run
    }
}

/// SFT (MLE or f-divergence loss, per `cfg`) on the demonstrations.
pub fn run_sft(ctx: &TrainContext, model: &PolicyModel, demos: &[Demonstration], cfg: &TrainConfig) -> Result<TrainRun> {
    let demos = resolve_demos(ctx.mdp, demos)?;
    let mut runner = Runner::new(ctx, cfg, model)?;
    let mut m = model.clone();
    let stage = StageData {
        name: "sft".into(),
        kind: StageKind::Sft,
        demos: &demos,
        pairs: &[],
        steps: cfg.steps,
    };
    runner.run_stage(&mut m, stage, &mut Measured, &mut None)?;
    Ok(runner.finish(m))
}

pub fn run_dpo(ctx: &TrainContext, model: &PolicyModel, pairs: &[PreferencePair], cfg: &TrainConfig) -> Result<TrainRun> {
    let pairs = resolve_pairs(ctx.mdp, pairs)?;
    let mut runner = Runner::new(ctx, cfg, model)?;
    let mut m = model.clone();
    let stage = StageData {
        name: "dpo".into(),
        kind: StageKind::Dpo,
        demos: &[],
        pairs: &pairs,
        steps: cfg.steps,
    };
    runner.run_stage(&mut m, stage, &mut Measured, &mut None)?;
    Ok(runner.finish(m))
}

/// SFT loss + λ·DPO loss with λ adapted after every evaluation window.
pub fn multi_objective_run(
    ctx: &TrainContext,
    model: &PolicyModel,
    demos: &[Demonstration],
    pairs: &[PreferencePair],
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    multi_objective_run_with(ctx, model, demos, pairs, cfg, &mut Measured)
}

pub fn multi_objective_run_with(
    ctx: &TrainContext,
    model: &PolicyModel,
    demos: &[Demonstration],
    pairs: &[PreferencePair],
    cfg: &TrainConfig,
    accuracy: &mut dyn AccuracySource,
) -> Result<TrainRun> {
    let demos = resolve_demos(ctx.mdp, demos)?;
    let pairs = resolve_pairs(ctx.mdp, pairs)?;
    let mut runner = Runner::new(ctx, cfg, model)?;
    let ctrl = LambdaController::new(&cfg.lambda);
    runner.run.lambda_trace.push(ctrl.lambda);
    let mut m = model.clone();
    let stage = StageData {
        name: "multi".into(),
        kind: StageKind::Multi,
        demos: &demos,
        pairs: &pairs,
        steps: cfg.steps,
    };
    runner.run_stage(&mut m, stage, accuracy, &mut Some(ctrl))?;
    Ok(runner.finish(m))
}

/// Stage names of an interleaved schedule: `sft1, dpo1, …, sftk, dpok`.
pub fn interleaved_stage_names(segments: usize) -> Vec<String> {
    (1..=segments).flat_map(|i| [format!("sft{i}"), format!("dpo{i}")]).collect()
}

/// Split demonstrations and pairs into `cfg.segments` contiguous parts and
/// alternate an SFT stage with a DPO stage on each. The `cfg.steps` budget is
/// spread evenly over the `2·segments` stages.
pub fn interleaved_run(
    ctx: &TrainContext,
    model: &PolicyModel,
    demos: &[Demonstration],
    pairs: &[PreferencePair],
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    let demos = resolve_demos(ctx.mdp, demos)?;
    let pairs = resolve_pairs(ctx.mdp, pairs)?;
    let mut runner = Runner::new(ctx, cfg, model)?;
    let k = cfg.segments;
    let demo_parts = partition(demos.len(), k);
    let pair_parts = partition(pairs.len(), k);
    let budgets = partition(cfg.steps, 2 * k);
    let mut m = model.clone();
    for i in 0..k {
        let sft = StageData {
            name: format!("sft{}", i + 1),
            kind: StageKind::Sft,
            demos: &demos[demo_parts[i].clone()],
            pairs: &[],
            steps: budgets[2 * i].len(),
        };
        runner.run_stage(&mut m, sft, &mut Measured, &mut None)?;
        let dpo = StageData {
            name: format!("dpo{}", i + 1),
            kind: StageKind::Dpo,
            demos: &[],
            pairs: &pairs[pair_parts[i].clone()],
            steps: budgets[2 * i + 1].len(),
        };
        runner.run_stage(&mut m, dpo, &mut Measured, &mut None)?;
    }
    Ok(runner.finish(m))
}

/// Dispatch on `cfg.objective`.
pub fn train(
    ctx: &TrainContext,
    model: &PolicyModel,
    demos: &[Demonstration],
    pairs: &[PreferencePair],
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    match cfg.objective {
        Objective::Mle | Objective::FSft => run_sft(ctx, model, demos, cfg),
        Objective::Dpo => run_dpo(ctx, model, pairs, cfg),
        Objective::MultiObjective => multi_objective_run(ctx, model, demos, pairs, cfg),
        Objective::Interleaved => interleaved_run(ctx, model, demos, pairs, cfg),
    }
}
