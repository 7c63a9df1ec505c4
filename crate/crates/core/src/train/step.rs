use crate::divergence::ClipCounters;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::loss::{
    dpo_pair_loss, resolve_demos, resolve_pairs, ExampleLoss, LogitView, ResolvedDemo, ResolvedPair,
    SftLoss,
};
use crate::mdp::{Demonstration, PreferencePair, StateTree, TokenMdp};
use crate::policy::{PolicyModel, PolicyTable};

/// Weighted-mean loss and dense logit gradient of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrad {
    pub loss: f64,
    /// Row-major by non-terminal index.
    pub logit_grad: Vec<f64>,
    pub counters: ClipCounters,
    /// DPO pair accuracy (ties count ½), when the batch had pairs.
    pub accuracy: Option<f64>,
}

impl BatchGrad {
    pub fn zero(tree: &StateTree) -> Self {
        BatchGrad {
            loss: 0.0,
            logit_grad: vec![0.0; tree.n_nonterminal() * tree.vocab()],
            counters: ClipCounters::default(),
            accuracy: None,
        }
    }

    /// `self += scale · other` (loss and gradient).
    pub fn add_scaled(&mut self, other: &BatchGrad, scale: f64) {
        self.loss += scale * other.loss;
        for (g, o) in self.logit_grad.iter_mut().zip(&other.logit_grad) {
            *g += scale * o;
        }
        self.counters.merge(&other.counters);
        if other.accuracy.is_some() {
            self.accuracy = other.accuracy;
        }
    }
}

/// Fixed-order reduction so every execution strategy sums identically.
fn reduce(tree: &StateTree, examples: Vec<(f64, ExampleLoss)>) -> BatchGrad {
    let vocab = tree.vocab();
    let mut out = BatchGrad::zero(tree);
    let total_weight: f64 = examples.iter().map(|(w, _)| w).sum();
    if total_weight == 0.0 {
        return out;
    }
    for (w, ex) in &examples {
        let scale = w / total_weight;
        out.loss += scale * ex.value;
        for (nt, row) in &ex.grad {
            for (g, r) in out.logit_grad[nt * vocab..(nt + 1) * vocab].iter_mut().zip(row) {
                *g += scale * r;
            }
        }
        out.counters.merge(&ex.counters);
    }
    out
}

pub fn sft_batch(
    exec: Exec,
    view: &LogitView,
    reference: &PolicyTable,
    loss: &SftLoss,
    demos: &[ResolvedDemo],
) -> BatchGrad {
    let examples = exec.map_slice(demos, |d| (d.weight, loss.evaluate(view, reference, d.terminal)));
    reduce(view.tree, examples)
}

pub fn dpo_batch(
    exec: Exec,
    view: &LogitView,
    reference: &PolicyTable,
    beta: f64,
    pairs: &[ResolvedPair],
) -> BatchGrad {
    let results = exec.map_slice(pairs, |p| dpo_pair_loss(view, reference, beta, p.chosen, p.rejected));
    let accuracy = if results.is_empty() {
        None
    } else {
        Some(results.iter().map(|r| r.correct).sum::<f64>() / results.len() as f64)
    };
    let mut out = reduce(view.tree, results.into_iter().map(|r| (1.0, r.loss)).collect());
    out.accuracy = accuracy;
    out
}

/// Summary of one gradient-descent step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Batch loss before the update.
    pub loss: f64,
    /// Euclidean norm of the parameter gradient.
    pub grad_norm: f64,
    pub counters: ClipCounters,
    pub accuracy: Option<f64>,
}

/// Apply `θ ← θ − lr ∇θ` from a logit-gradient batch.
pub(crate) fn apply(
    model: &mut PolicyModel,
    tree: &StateTree,
    batch: BatchGrad,
    lr: f64,
    step: usize,
) -> Result<StepOutcome> {
    let grad = model.backward(tree, &batch.logit_grad);
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !batch.loss.is_finite() || !norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!(
                "loss {} grad_norm {} counters {:?}",
                batch.loss, norm, batch.counters
            ),
        });
    }
    for (p, g) in model.params_mut().iter_mut().zip(&grad) {
        *p -= lr * g;
    }
    Ok(StepOutcome {
        loss: batch.loss,
        grad_norm: norm,
        counters: batch.counters,
        accuracy: batch.accuracy,
    })
}

pub(crate) fn view_of<'a>(model: &PolicyModel, tree: &'a StateTree, logits: &'a [f64]) -> LogitView<'a> {
    LogitView {
        tree,
        logits,
        temperature: model.temperature,
    }
}

/// One full gradient step on the weighted mean SFT loss of `batch`.
pub fn sft_step(
    mdp: &TokenMdp,
    model: &mut PolicyModel,
    reference: &PolicyTable,
    batch: &[Demonstration],
    loss: &SftLoss,
    lr: f64,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let demos = resolve_demos(mdp, batch)?;
    let tree = mdp.tree();
    let logits = model.logits_table(tree);
    let grad = sft_batch(Exec::default(), &view_of(model, tree, &logits), reference, loss, &demos);
    apply(model, tree, grad, lr, 0)
}

/// One full gradient step on the mean DPO loss of `batch`.
pub fn dpo_step(
    mdp: &TokenMdp,
    model: &mut PolicyModel,
    reference: &PolicyTable,
    batch: &[PreferencePair],
    beta: f64,
    lr: f64,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let pairs = resolve_pairs(mdp, batch)?;
    let tree = mdp.tree();
    if let Some((nt, action)) = model.table(tree).first_zero() {
        return Err(Error::ZeroProbability {
            state: tree.nt_state(nt),
            action,
        });
    }
    let logits = model.logits_table(tree);
    let grad = dpo_batch(Exec::default(), &view_of(model, tree, &logits), reference, beta, &pairs);
    apply(model, tree, grad, lr, 0)
}

/// Mean DPO loss and accuracy of a model on a set of pairs (no update).
pub fn dpo_eval(
    tree: &StateTree,
    model: &PolicyModel,
    reference: &PolicyTable,
    beta: f64,
    pairs: &[ResolvedPair],
) -> (f64, f64) {
    let logits = model.logits_table(tree);
    let view = view_of(model, tree, &logits);
    let mut loss = 0.0;
    let mut acc = 0.0;
    for p in pairs {
        let r = dpo_pair_loss(&view, reference, beta, p.chosen, p.rejected);
        loss += r.loss.value;
        acc += r.correct;
    }
    let n = pairs.len().max(1) as f64;
    (loss / n, acc / n)
}
