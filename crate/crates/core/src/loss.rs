//! Per-example training losses with analytic gradients w.r.t. logits.
//!
//! The f-divergence losses plug the implicit reward of a demonstration,
//!
//! ```text
//! r̂(x,y) = β log π(y|x)/π_ref(y|x) + V(s₀) − V(s_T),   V(s_T) = 0,
//! V(s₀)  = β log Σ_a π_ref(a|s₀) exp(l_a(s₀)/β),
//! ```
//!
//! into the conjugate objective `ℓ = f*(−r̂) + V(s₀)`. For total variation
//! `f*(t) = t`, so `ℓ = −β log π(y|x) + β log π_ref(y|x)` and the gradient is
//! exactly β times the negative log-likelihood gradient. Reported values keep
//! the policy-independent constants.

use crate::divergence::{ClipCounters, FDivergenceSpec, LossKind};
use crate::math::{logsumexp, sigmoid, softmax, softplus};
use crate::mdp::{Demonstration, PreferencePair, StateTree, TokenMdp};
use crate::policy::PolicyTable;
use crate::error::Result;

/// Sparse logit gradient of one example: `(non-terminal index, row)`.
pub type SparseGrad = Vec<(usize, Vec<f64>)>;

/// Loss value and logit gradient of one example.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExampleLoss {
    pub value: f64,
    pub grad: SparseGrad,
    pub counters: ClipCounters,
}

/// Logits of every non-terminal state plus the temperature that maps them
/// to probabilities.
#[derive(Debug, Clone, Copy)]
pub struct LogitView<'a> {
    pub tree: &'a StateTree,
    pub logits: &'a [f64],
    pub temperature: f64,
}

impl<'a> LogitView<'a> {
    pub fn row(&self, nt: usize) -> &'a [f64] {
        let v = self.tree.vocab();
        &self.logits[nt * v..(nt + 1) * v]
    }

    pub fn probs(&self, nt: usize) -> Vec<f64> {
        softmax(self.row(nt), self.temperature)
    }

    /// Log-probability of a full path plus per-step `∂ log π(y|x)/∂l` rows.
    fn path_terms(&self, s_terminal: usize) -> (f64, SparseGrad) {
        let tau = self.temperature;
        let mut total = 0.0;
        let mut grads = Vec::new();
        for (s, a) in self.tree.path(s_terminal) {
            let nt = self.tree.nt_index(s).expect("path states are non-terminal");
            let row = self.row(nt);
            let scaled: Vec<f64> = row.iter().map(|l| l / tau).collect();
            let lse = logsumexp(&scaled);
            // same rounding as PolicyTable::from_logits, so π = π_ref gives exact ties
            total += (scaled[a] - lse).exp().ln();
            let g: Vec<f64> = scaled
                .iter()
                .enumerate()
                .map(|(b, x)| ((b == a) as u8 as f64 - (x - lse).exp()) / tau)
                .collect();
            grads.push((nt, g));
        }
        (total, grads)
    }
}

fn ref_log_prob(tree: &StateTree, reference: &PolicyTable, s_terminal: usize) -> f64 {
    reference.path_log_prob(tree, s_terminal)
}

/// Per-example loss derived from an f-divergence.
#[derive(Debug, Clone, Copy)]
pub struct PerExampleLoss {
    pub spec: FDivergenceSpec,
    pub beta: f64,
    /// Treat `V(s₀)` as a constant when differentiating.
    pub stop_grad_value: bool,
}

/// Build the conjugate loss for `spec` at regularization `beta`.
pub fn build_loss(spec: FDivergenceSpec, beta: f64) -> PerExampleLoss {
    PerExampleLoss {
        spec,
        beta,
        stop_grad_value: false,
    }
}

impl PerExampleLoss {
    pub fn with_stop_grad(mut self, stop: bool) -> Self {
        self.stop_grad_value = stop;
        self
    }

    pub fn name(&self) -> &'static str {
        self.spec.name
    }

    /// `V(s₀)` and `∂V(s₀)/∂l(s₀)` from the current logits.
    pub fn root_value(&self, view: &LogitView, reference: &PolicyTable, prompt: usize) -> (f64, Vec<f64>) {
        let root = view.tree.root(prompt);
        let nt = view.tree.nt_index(root).expect("roots are non-terminal");
        let shifted: Vec<f64> = reference
            .row(nt)
            .iter()
            .zip(view.row(nt))
            .map(|(p, l)| p.ln() + l / self.beta)
            .collect();
        let lse = logsumexp(&shifted);
        let weights = shifted.iter().map(|x| (x - lse).exp()).collect();
        (self.beta * lse, weights)
    }

    /// Implicit reward `r̂` of a complete response ending at `s_terminal`.
    pub fn implicit_reward(&self, view: &LogitView, reference: &PolicyTable, s_terminal: usize) -> f64 {
        let (log_pi, _) = view.path_terms(s_terminal);
        let (v0, _) = self.root_value(view, reference, view.tree.prompt_of(s_terminal));
        self.beta * (log_pi - ref_log_prob(view.tree, reference, s_terminal)) + v0
    }

    pub fn evaluate(&self, view: &LogitView, reference: &PolicyTable, s_terminal: usize) -> ExampleLoss {
        let tree = view.tree;
        let prompt = tree.prompt_of(s_terminal);
        let (log_pi, mut path_grad) = view.path_terms(s_terminal);
        let log_ref = ref_log_prob(tree, reference, s_terminal);
        let (v0, v0_grad) = self.root_value(view, reference, prompt);
        let r_hat = self.beta * (log_pi - log_ref) + v0;
        let mut counters = ClipCounters::default();
        let (f_star, f_star_prime) = self.spec.conjugate_for_loss(-r_hat, &mut counters);
        let value = f_star + v0;
        // ∂ℓ/∂r̂ = −f*'(−r̂)
        let d_r = -f_star_prime;
        for (_, g) in path_grad.iter_mut() {
            for x in g.iter_mut() {
                *x *= d_r * self.beta;
            }
        }
        if !self.stop_grad_value {
            let coeff = d_r + 1.0;
            if coeff != 0.0 {
                let root_nt = tree.nt_index(tree.root(prompt)).unwrap();
                let row: Vec<f64> = v0_grad.iter().map(|w| coeff * w).collect();
                path_grad.push((root_nt, row));
            }
        }
        ExampleLoss {
            value,
            grad: path_grad,
            counters,
        }
    }

    /// Whether the loss gradient can depend on `π_ref`.
    pub fn keeps_reference_term(&self) -> bool {
        self.spec.loss_kind != LossKind::TvMle
    }
}

/// Plain negative log-likelihood `−log π(y|x)` of one complete response.
pub fn nll(view: &LogitView, s_terminal: usize) -> ExampleLoss {
    let (log_pi, mut grad) = view.path_terms(s_terminal);
    for (_, g) in grad.iter_mut() {
        for x in g.iter_mut() {
            *x = -*x;
        }
    }
    ExampleLoss {
        value: -log_pi,
        grad,
        counters: ClipCounters::default(),
    }
}

/// Outcome of the DPO loss on one pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairLoss {
    pub loss: ExampleLoss,
    /// `β[log π/π_ref(y_w) − log π/π_ref(y_l)]`.
    pub margin: f64,
    /// 1 if the margin is positive, ½ on an exact tie, else 0.
    pub correct: f64,
}

/// `−log σ(β [log π(y_w|x)/π_ref(y_w|x) − log π(y_l|x)/π_ref(y_l|x)])`.
pub fn dpo_pair_loss(
    view: &LogitView,
    reference: &PolicyTable,
    beta: f64,
    chosen: usize,
    rejected: usize,
) -> PairLoss {
    let tree = view.tree;
    let (lw, gw) = view.path_terms(chosen);
    let (ll, gl) = view.path_terms(rejected);
    let rw = lw - ref_log_prob(tree, reference, chosen);
    let rl = ll - ref_log_prob(tree, reference, rejected);
    let margin = beta * (rw - rl);
    let value = softplus(-margin);
    let d_margin = -sigmoid(-margin);
    let mut grad: SparseGrad = Vec::with_capacity(gw.len() + gl.len());
    for (nt, g) in gw {
        grad.push((nt, g.iter().map(|x| d_margin * beta * x).collect()));
    }
    for (nt, g) in gl {
        grad.push((nt, g.iter().map(|x| -d_margin * beta * x).collect()));
    }
    let correct = if margin > 0.0 {
        1.0
    } else if margin == 0.0 {
        0.5
    } else {
        0.0
    };
    PairLoss {
        loss: ExampleLoss {
            value,
            grad,
            counters: ClipCounters::default(),
        },
        margin,
        correct,
    }
}

/// Demonstration with its terminal state resolved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedDemo {
    pub terminal: usize,
    pub weight: f64,
}

/// Pair with both terminal states resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolvedPair {
    pub chosen: usize,
    pub rejected: usize,
}

pub fn resolve_demos(mdp: &TokenMdp, demos: &[Demonstration]) -> Result<Vec<ResolvedDemo>> {
    demos
        .iter()
        .map(|d| {
            Ok(ResolvedDemo {
                terminal: mdp.terminal_index(d.prompt_id, &d.response)?,
                weight: d.weight,
            })
        })
        .collect()
}

pub fn resolve_pairs(mdp: &TokenMdp, pairs: &[PreferencePair]) -> Result<Vec<ResolvedPair>> {
    pairs
        .iter()
        .map(|p| {
            Ok(ResolvedPair {
                chosen: mdp.terminal_index(p.prompt_id, &p.chosen)?,
                rejected: mdp.terminal_index(p.prompt_id, &p.rejected)?,
            })
        })
        .collect()
}

/// Which sequence-level SFT objective a trainer optimizes.
#[derive(Debug, Clone, Copy)]
pub enum SftLoss {
    /// Plain negative log-likelihood.
    Mle,
    Divergence(PerExampleLoss),
}

impl SftLoss {
    pub fn evaluate(&self, view: &LogitView, reference: &PolicyTable, s_terminal: usize) -> ExampleLoss {
        match self {
            SftLoss::Mle => nll(view, s_terminal),
            SftLoss::Divergence(l) => l.evaluate(view, reference, s_terminal),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SftLoss::Mle => "mle",
            SftLoss::Divergence(l) => l.name(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::{PEARSON_CHI2, TOTAL_VARIATION};
    use crate::policy::PolicyModel;

    #[test]
    fn tv_loss_at_uniform_reference() {
        let mdp = TokenMdp::new(2, 1, vec![vec![0]], None, 1.0, 10).unwrap();
        let tree = mdp.tree();
        let model = PolicyModel::tabular(tree);
        let logits = model.logits_table(tree);
        let view = LogitView { tree, logits: &logits, temperature: 1.0 };
        let reference = PolicyTable::uniform(tree);
        let beta = 0.7;
        let loss = build_loss(TOTAL_VARIATION, beta);
        let s = mdp.terminal_index(0, &[1]).unwrap();
        let ex = loss.evaluate(&view, &reference, s);
        // NLL part is β log 2; the retained constant is β log π_ref = −β log 2
        let constant = beta * reference.path_log_prob(tree, s);
        assert!((ex.value - (beta * 2f64.ln() + constant)).abs() < 1e-15);
        assert!(loss.root_value(&view, &reference, 0).0.abs() < 1e-15);
    }

    #[test]
    fn pearson_zero_reward_zero_loss() {
        let mdp = TokenMdp::new(3, 1, vec![vec![0]], None, 1.0, 10).unwrap();
        let tree = mdp.tree();
        let logits = vec![0.0; 3];
        let view = LogitView { tree, logits: &logits, temperature: 1.0 };
        let reference = PolicyTable::uniform(tree);
        let loss = build_loss(PEARSON_CHI2, 0.5);
        let s = mdp.terminal_index(0, &[2]).unwrap();
        assert_eq!(loss.implicit_reward(&view, &reference, s), 0.0);
        assert_eq!(loss.evaluate(&view, &reference, s).value, 0.0);
    }

    #[test]
    fn dpo_at_reference_is_log_two() {
        let mdp = TokenMdp::random(3, 2, 1, 1.0, (-1.0, 1.0), 0).unwrap();
        let tree = mdp.tree();
        let model = PolicyModel::random_tabular(tree, 1.0, 5);
        let logits = model.logits_table(tree);
        let view = LogitView { tree, logits: &logits, temperature: 1.0 };
        let reference = model.table(tree);
        let w = mdp.terminal_index(0, &[0, 1]).unwrap();
        let l = mdp.terminal_index(0, &[2, 2]).unwrap();
        let out = dpo_pair_loss(&view, &reference, 0.1, w, l);
        assert!((out.loss.value - 2f64.ln()).abs() < 1e-12);
        assert_eq!(out.correct, 0.5);
    }
}
