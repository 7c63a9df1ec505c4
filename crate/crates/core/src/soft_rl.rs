//! Exact KL-regularized soft RL on the token tree.
//!
//! Backward induction from the terminal states (value 0) to the roots:
//!
//! ```text
//! Q(s,a) = r(s,a) + γ V(s⊕a)
//! V(s)   = β log Σ_a π_ref(a|s) exp(Q(s,a)/β)
//! π*(a|s) = π_ref(a|s) exp((Q(s,a) − V(s))/β)
//! ```
//!
//! The entropy-regularized form (`V = β log Σ exp(Q/β)`, no reference
//! weights) is available through [`ValueForm::Entropy`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::logsumexp;
use crate::mdp::{RewardTable, State, StateTree, TokenMdp};
use crate::policy::PolicyTable;

/// Which log-sum-exp form defines the soft value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueForm {
    /// `V = β log Σ π_ref exp(Q/β)`.
    #[default]
    ReferenceWeighted,
    /// `V = β log Σ exp(Q/β)`.
    Entropy,
}

/// Exact soft-optimal solution under a reward, β, γ and reference policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftSolution {
    pub beta: f64,
    pub gamma: f64,
    pub form: ValueForm,
    pub ref_policy_id: String,
    pub vocab: usize,
    /// `Q*(s,a)`, row-major by non-terminal index.
    pub q: Vec<f64>,
    /// `V*(s)` for every state; 0 at terminal states.
    pub v: Vec<f64>,
    /// `π*(a|s)`, row-major by non-terminal index.
    pub pi_star: Vec<f64>,
    pub reference: PolicyTable,
    /// `J(π*) = V*(s₀)` per prompt.
    pub j_star: Vec<f64>,
}

impl SoftSolution {
    pub fn q(&self, nt: usize, a: usize) -> f64 {
        self.q[nt * self.vocab + a]
    }

    pub fn q_row(&self, nt: usize) -> &[f64] {
        &self.q[nt * self.vocab..(nt + 1) * self.vocab]
    }

    pub fn policy(&self) -> PolicyTable {
        PolicyTable::from_logits(
            self.vocab,
            &self.pi_star.iter().map(|p| p.ln()).collect::<Vec<_>>(),
            1.0,
        )
    }

    /// Structured report keyed by state identity.
    pub fn report(&self, tree: &StateTree) -> SolutionReport {
        let states = (0..tree.len())
            .map(|s| StateValue {
                state: tree.state(s),
                v: self.v[s],
            })
            .collect();
        let mut pairs = Vec::with_capacity(self.q.len());
        for k in 0..tree.n_nonterminal() {
            let state = tree.state(tree.nt_state(k));
            for a in 0..self.vocab {
                pairs.push(PairValue {
                    state: state.clone(),
                    action: a as u32,
                    q: self.q(k, a),
                    pi: self.pi_star[k * self.vocab + a],
                });
            }
        }
        SolutionReport {
            beta: self.beta,
            gamma: self.gamma,
            form: self.form,
            ref_policy_id: self.ref_policy_id.clone(),
            j_star: self.j_star.clone(),
            states,
            pairs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateValue {
    pub state: State,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairValue {
    pub state: State,
    pub action: u32,
    pub q: f64,
    pub pi: f64,
}

/// Serialized view of a [`SoftSolution`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionReport {
    pub beta: f64,
    pub gamma: f64,
    pub form: ValueForm,
    pub ref_policy_id: String,
    pub j_star: Vec<f64>,
    pub states: Vec<StateValue>,
    pub pairs: Vec<PairValue>,
}

fn soft_value(form: ValueForm, beta: f64, ref_row: &[f64], q_row: &[f64]) -> f64 {
    let scaled: Vec<f64> = match form {
        ValueForm::ReferenceWeighted => ref_row
            .iter()
            .zip(q_row)
            .map(|(p, q)| p.ln() + q / beta)
            .collect(),
        ValueForm::Entropy => q_row.iter().map(|q| q / beta).collect(),
    };
    beta * logsumexp(&scaled)
}

fn check_reference(reference: &PolicyTable, tree: &StateTree) -> Result<()> {
    if reference.vocab() != tree.vocab() || reference.n_rows() != tree.n_nonterminal() {
        return Err(Error::MeasureMismatch);
    }
    if let Some((nt, action)) = reference.first_zero() {
        return Err(Error::ZeroReferenceProbability {
            state: tree.nt_state(nt),
            action,
        });
    }
    Ok(())
}

/// Solve with the reference-weighted value form.
pub fn solve_soft(
    mdp: &TokenMdp,
    reward: &RewardTable,
    beta: f64,
    reference: &PolicyTable,
) -> Result<SoftSolution> {
    solve_soft_with(mdp, reward, beta, reference, ValueForm::ReferenceWeighted)
}

pub fn solve_soft_with(
    mdp: &TokenMdp,
    reward: &RewardTable,
    beta: f64,
    reference: &PolicyTable,
    form: ValueForm,
) -> Result<SoftSolution> {
    if !(beta > 0.0) {
        return Err(Error::NonPositiveBeta(beta));
    }
    let tree = mdp.tree();
    check_reference(reference, tree)?;
    let vocab = tree.vocab();
    let gamma = mdp.gamma();
    let mut v = vec![0.0; tree.len()];
    let mut q = vec![0.0; tree.n_nonterminal() * vocab];
    let mut pi_star = vec![0.0; q.len()];
    for s in (0..tree.len()).rev() {
        let Some(nt) = tree.nt_index(s) else {
            continue;
        };
        let row = nt * vocab..(nt + 1) * vocab;
        for a in 0..vocab {
            q[nt * vocab + a] = reward.get(nt, a) + gamma * v[tree.child(s, a)];
        }
        let ref_row = reference.row(nt);
        v[s] = soft_value(form, beta, ref_row, &q[row.clone()]);
        for a in 0..vocab {
            let w = match form {
                ValueForm::ReferenceWeighted => ref_row[a],
                ValueForm::Entropy => 1.0,
            };
            pi_star[nt * vocab + a] = w * ((q[nt * vocab + a] - v[s]) / beta).exp();
        }
    }
    let j_star = (0..tree.n_prompts()).map(|p| v[tree.root(p)]).collect();
    Ok(SoftSolution {
        beta,
        gamma,
        form,
        ref_policy_id: String::from("reference"),
        vocab,
        q,
        v,
        pi_star,
        reference: reference.clone(),
        j_star,
    })
}

/// Maximum residuals of the fixed-point equations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// `max |V − β log Σ π_ref exp(Q/β)|` (form-appropriate).
    pub value: f64,
    /// `max |Q − r − γ V(s⊕a)|`.
    pub bellman: f64,
    /// `max |Σ_a π* − 1|`.
    pub normalization: f64,
    /// `max |π* − π_ref exp((Q − V)/β)|`.
    pub policy: f64,
    /// `max |V(s)|` over terminal states.
    pub terminal: f64,
}

impl ResidualReport {
    pub fn max(&self) -> f64 {
        [self.value, self.bellman, self.normalization, self.policy, self.terminal]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

pub fn verify_fixed_point(sol: &SoftSolution, mdp: &TokenMdp, reward: &RewardTable) -> ResidualReport {
    let tree = mdp.tree();
    let vocab = sol.vocab;
    let mut r = ResidualReport {
        value: 0.0,
        bellman: 0.0,
        normalization: 0.0,
        policy: 0.0,
        terminal: 0.0,
    };
    for s in 0..tree.len() {
        let Some(nt) = tree.nt_index(s) else {
            r.terminal = r.terminal.max(sol.v[s].abs());
            continue;
        };
        let ref_row = sol.reference.row(nt);
        let v = soft_value(sol.form, sol.beta, ref_row, sol.q_row(nt));
        r.value = r.value.max((sol.v[s] - v).abs());
        let mut total = 0.0;
        for a in 0..vocab {
            let target = reward.get(nt, a) + sol.gamma * sol.v[tree.child(s, a)];
            r.bellman = r.bellman.max((sol.q(nt, a) - target).abs());
            let pi = sol.pi_star[nt * vocab + a];
            total += pi;
            let w = match sol.form {
                ValueForm::ReferenceWeighted => ref_row[a],
                ValueForm::Entropy => 1.0,
            };
            let expect = w * ((sol.q(nt, a) - sol.v[s]) / sol.beta).exp();
            r.policy = r.policy.max((pi - expect).abs());
        }
        r.normalization = r.normalization.max((total - 1.0).abs());
    }
    r
}

/// Recompute `V` from the solution's `Q` under either form (terminal
/// states 0).
pub fn values_from_q(sol: &SoftSolution, tree: &StateTree, form: ValueForm) -> Vec<f64> {
    (0..tree.len())
        .map(|s| match tree.nt_index(s) {
            Some(nt) => soft_value(form, sol.beta, sol.reference.row(nt), sol.q_row(nt)),
            None => 0.0,
        })
        .collect()
}

/// Reward recovered from one complete response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReward {
    pub prompt_id: usize,
    pub response: Vec<u32>,
    pub reward: f64,
}

/// Rewards implied by a policy through the implicit-reward relation.
///
/// Per step, `r̂(s,a) = β log(π/π_ref)(a|s) + V(s) − γ V(s⊕a)`; per
/// sequence, `r(x,y) = Σₜ γᵗ β log(π/π_ref)(aₜ|sₜ) + V(s₀) − γᵀ V(s_T)`,
/// which is what the per-step rewards telescope to. With `γ = 1` the
/// sequence form is `β log π(y|x)/π_ref(y|x) + V(s₀) − V(s_T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImplicitRewardReport {
    pub beta: f64,
    pub gamma: f64,
    pub sequences: Vec<SequenceReward>,
    /// `r̂(s,a)`, row-major by non-terminal index.
    pub per_step: Vec<f64>,
    /// `V(s₀)` per prompt.
    pub value_terms: Vec<f64>,
}

impl ImplicitRewardReport {
    pub fn per_step_table(&self, tree: &StateTree) -> RewardTable {
        RewardTable::from_values(tree, self.per_step.clone()).expect("per-step table matches tree")
    }
}

pub fn implicit_reward(
    mdp: &TokenMdp,
    policy: &PolicyTable,
    reference: &PolicyTable,
    beta: f64,
    values: &[f64],
) -> Result<ImplicitRewardReport> {
    if !(beta > 0.0) {
        return Err(Error::NonPositiveBeta(beta));
    }
    let tree = mdp.tree();
    let gamma = mdp.gamma();
    let vocab = tree.vocab();
    if let Some((nt, action)) = policy.first_zero() {
        return Err(Error::ZeroProbability {
            state: tree.nt_state(nt),
            action,
        });
    }
    check_reference(reference, tree)?;
    if values.len() != tree.len() {
        return Err(Error::LengthMismatch {
            left: values.len(),
            right: tree.len(),
        });
    }
    let log_ratio = |nt: usize, a: usize| (policy.prob(nt, a) / reference.prob(nt, a)).ln();
    let mut per_step = vec![0.0; tree.n_nonterminal() * vocab];
    for k in 0..tree.n_nonterminal() {
        let s = tree.nt_state(k);
        for a in 0..vocab {
            per_step[k * vocab + a] =
                beta * log_ratio(k, a) + values[s] - gamma * values[tree.child(s, a)];
        }
    }
    let sequences = tree
        .terminal_states()
        .map(|s_t| {
            let path = tree.path(s_t);
            let mut discount = 1.0;
            let mut total = 0.0;
            for &(s, a) in &path {
                total += discount * beta * log_ratio(tree.nt_index(s).unwrap(), a);
                discount *= gamma;
            }
            let prompt = tree.prompt_of(s_t);
            let reward = total + values[tree.root(prompt)] - discount * values[s_t];
            SequenceReward {
                prompt_id: prompt,
                response: tree.state(s_t).response,
                reward,
            }
        })
        .collect();
    let value_terms = (0..tree.n_prompts()).map(|p| values[tree.root(p)]).collect();
    Ok(ImplicitRewardReport {
        beta,
        gamma,
        sequences,
        per_step,
        value_terms,
    })
}

/// Logits read as a Q-function up to a per-state constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitValues {
    /// `V(s) = β log Σ_a π_ref(a|s) exp(l_a/β)`; 0 at terminal states.
    pub v: Vec<f64>,
    /// Centered `q̃(s,a) = β(l_a/τ − log π_ref(a|s)) + κ(s)` with `κ(s)`
    /// chosen so that `β log Σ π_ref exp(q̃/β) = V(s)`. Then
    /// `π_ref exp((q̃ − V)/β)` reproduces the policy exactly; `q̃` equals the
    /// true `Q` only up to the unidentifiable state constant `C(s)`.
    pub q: Vec<f64>,
}

/// `logits` are row-major by non-terminal index.
pub fn policy_to_q(
    tree: &StateTree,
    logits: &[f64],
    temperature: f64,
    beta: f64,
    reference: &PolicyTable,
) -> LogitValues {
    let vocab = tree.vocab();
    let mut v = vec![0.0; tree.len()];
    let mut q = vec![0.0; logits.len()];
    for k in 0..tree.n_nonterminal() {
        let s = tree.nt_state(k);
        let l = &logits[k * vocab..(k + 1) * vocab];
        let ref_row = reference.row(k);
        v[s] = soft_value(ValueForm::ReferenceWeighted, beta, ref_row, l);
        let tempered: Vec<f64> = l.iter().map(|x| x / temperature).collect();
        let kappa = v[s] - beta * logsumexp(&tempered);
        for a in 0..vocab {
            q[k * vocab + a] = beta * (tempered[a] - ref_row[a].ln()) + kappa;
        }
    }
    LogitValues { v, q }
}

/// `V(s) = β log Σ_a w_a exp(l_a/β)` at one state, with reference weights
/// or (for [`ValueForm::Entropy`]) unit weights.
pub fn logit_value(form: ValueForm, beta: f64, ref_row: &[f64], logits: &[f64]) -> f64 {
    soft_value(form, beta, ref_row, logits)
}

/// The reward under which a given policy is already soft-optimal, with
/// `V(s₀) = v0[prompt]` and `V = 0` at every deeper state:
/// `r(s,a) = β log(π/π_ref)(a|s) + V(s) − γ V(s⊕a)`.
pub fn initial_reward(
    mdp: &TokenMdp,
    policy: &PolicyTable,
    reference: &PolicyTable,
    beta: f64,
    v0: &[f64],
) -> RewardTable {
    let tree = mdp.tree();
    let vocab = tree.vocab();
    let mut values = Vec::with_capacity(tree.n_nonterminal() * vocab);
    for k in 0..tree.n_nonterminal() {
        let s = tree.nt_state(k);
        let v_here = if tree.depth(s) == 0 { v0[tree.prompt_of(s)] } else { 0.0 };
        // successors sit at depth ≥ 1, so the γ V(s⊕a) term vanishes
        for a in 0..vocab {
            values.push(beta * (policy.prob(k, a) / reference.prob(k, a)).ln() + v_here);
        }
    }
    RewardTable::from_values(tree, values).expect("table matches tree")
}

/// Exact `E_π[Σ γᵗ r]`, prompts uniform.
pub fn expected_return(mdp: &TokenMdp, reward: &RewardTable, policy: &PolicyTable) -> f64 {
    soft_objective(mdp, reward, policy, policy, 1.0)
}

/// Exact `E_π[Σ γᵗ (r − β log(π/π_ref))]`, prompts uniform. At `π = π*`
/// this equals the mean of `V*(s₀)` over prompts.
pub fn soft_objective(
    mdp: &TokenMdp,
    reward: &RewardTable,
    policy: &PolicyTable,
    reference: &PolicyTable,
    beta: f64,
) -> f64 {
    let tree = mdp.tree();
    let gamma = mdp.gamma();
    let vocab = tree.vocab();
    // backward pass: W(s) = Σ_a π(a|s) [r − β log ratio + γ W(s⊕a)]
    let mut w = vec![0.0; tree.len()];
    for s in (0..tree.len()).rev() {
        let Some(nt) = tree.nt_index(s) else { continue };
        w[s] = (0..vocab)
            .map(|a| {
                let p = policy.prob(nt, a);
                if p == 0.0 {
                    0.0
                } else {
                    let kl = beta * (p / reference.prob(nt, a)).ln();
                    p * (reward.get(nt, a) - kl + gamma * w[tree.child(s, a)])
                }
            })
            .sum();
    }
    (0..tree.n_prompts()).map(|p| w[tree.root(p)]).sum::<f64>() / tree.n_prompts() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(rewards: [f64; 2]) -> TokenMdp {
        let mdp = TokenMdp::new(2, 1, vec![vec![0]], None, 1.0, 10).unwrap();
        let r = RewardTable::from_values(mdp.tree(), rewards.to_vec()).unwrap();
        mdp.with_reward(r)
    }

    #[test]
    fn zero_reward_is_uniform() {
        let mdp = one_step([0.0, 0.0]);
        let pi_ref = PolicyTable::uniform(mdp.tree());
        let sol = solve_soft(&mdp, mdp.reward(), 1.0, &pi_ref).unwrap();
        assert!(sol.v[0].abs() < 1e-15);
        assert!((sol.pi_star[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn one_step_softmax() {
        let mdp = one_step([1.0, 0.0]);
        let pi_ref = PolicyTable::uniform(mdp.tree());
        let sol = solve_soft(&mdp, mdp.reward(), 1.0, &pi_ref).unwrap();
        let e = std::f64::consts::E;
        assert!((sol.pi_star[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((sol.v[0] - (0.5 * e + 0.5).ln()).abs() < 1e-12);
        assert_eq!(sol.j_star, vec![sol.v[0]]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mdp = one_step([1.0, 0.0]);
        let pi_ref = PolicyTable::uniform(mdp.tree());
        assert!(matches!(
            solve_soft(&mdp, mdp.reward(), 0.0, &pi_ref),
            Err(Error::NonPositiveBeta(_))
        ));
        let zero = PolicyTable::constant(mdp.tree(), 0);
        assert!(matches!(
            solve_soft(&mdp, mdp.reward(), 1.0, &zero),
            Err(Error::ZeroReferenceProbability { action: 1, .. })
        ));
    }

    #[test]
    fn tiny_beta_does_not_overflow() {
        let mdp = TokenMdp::random(3, 3, 1, 1.0, (-1.0, 1.0), 4).unwrap();
        let pi_ref = PolicyTable::uniform(mdp.tree());
        let sol = solve_soft(&mdp, mdp.reward(), 1e-3, &pi_ref).unwrap();
        assert!(sol.v.iter().all(|v| v.is_finite()));
        assert!(verify_fixed_point(&sol, &mdp, mdp.reward()).max() <= 1e-8);
    }

    #[test]
    fn perturbed_q_is_detected() {
        let mdp = TokenMdp::random(2, 2, 1, 1.0, (-1.0, 1.0), 4).unwrap();
        let pi_ref = PolicyTable::uniform(mdp.tree());
        let mut sol = solve_soft(&mdp, mdp.reward(), 0.5, &pi_ref).unwrap();
        assert!(verify_fixed_point(&sol, &mdp, mdp.reward()).max() <= 1e-8);
        sol.q[1] += 0.1;
        assert!(verify_fixed_point(&sol, &mdp, mdp.reward()).bellman >= 0.0999);
    }

    #[test]
    fn entropy_form_offset_with_uniform_reference() {
        let mdp = TokenMdp::random(4, 3, 2, 0.9, (-1.0, 1.0), 21).unwrap();
        let pi_ref = PolicyTable::uniform(mdp.tree());
        let beta = 0.3;
        let sol = solve_soft(&mdp, mdp.reward(), beta, &pi_ref).unwrap();
        let ent = values_from_q(&sol, mdp.tree(), ValueForm::Entropy);
        for k in 0..mdp.tree().n_nonterminal() {
            let s = mdp.tree().nt_state(k);
            assert!((ent[s] - sol.v[s] - beta * 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn implicit_reward_at_reference_is_value_difference() {
        let mdp = TokenMdp::random(2, 2, 1, 1.0, (-1.0, 1.0), 2).unwrap();
        let pi_ref = PolicyTable::random(mdp.tree(), 1.0, 3);
        let values: Vec<f64> = (0..mdp.tree().len()).map(|s| s as f64 * 0.1).collect();
        let rep = implicit_reward(&mdp, &pi_ref, &pi_ref, 0.5, &values).unwrap();
        for seq in &rep.sequences {
            let s_t = mdp.terminal_index(seq.prompt_id, &seq.response).unwrap();
            assert!((seq.reward - (values[0] - values[s_t])).abs() < 1e-15);
        }
    }

    #[test]
    fn logit_shift_moves_value_not_policy() {
        let mdp = TokenMdp::random(3, 2, 1, 1.0, (-1.0, 1.0), 2).unwrap();
        let tree = mdp.tree();
        let pi_ref = PolicyTable::uniform(tree);
        let sol = solve_soft(&mdp, mdp.reward(), 1.0, &pi_ref).unwrap();
        let base = policy_to_q(tree, &sol.q, 1.0, 1.0, &pi_ref);
        for s in 0..tree.len() {
            assert!((base.v[s] - sol.v[s]).abs() < 1e-9);
        }
        let mut shifted = sol.q.clone();
        for x in &mut shifted[3..6] {
            *x += 7.0;
        }
        let moved = policy_to_q(tree, &shifted, 1.0, 1.0, &pi_ref);
        let s1 = tree.nt_state(1);
        assert!((moved.v[s1] - base.v[s1] - 7.0).abs() < 1e-12);
        let p0 = PolicyTable::from_logits(3, &sol.q, 1.0);
        let p1 = PolicyTable::from_logits(3, &shifted, 1.0);
        assert!(crate::math::max_abs_diff(p0.probs(), p1.probs()) < 1e-12);
    }

    #[test]
    fn soft_objective_of_optimum_is_root_value() {
        let mdp = TokenMdp::random(3, 3, 2, 0.9, (-1.0, 1.0), 8).unwrap();
        let pi_ref = PolicyTable::random(mdp.tree(), 1.0, 1);
        let sol = solve_soft(&mdp, mdp.reward(), 0.4, &pi_ref).unwrap();
        let j = soft_objective(&mdp, mdp.reward(), &sol.policy(), &pi_ref, 0.4);
        let mean_v0 = sol.j_star.iter().sum::<f64>() / 2.0;
        assert!((j - mean_v0).abs() < 1e-10);
    }
}
