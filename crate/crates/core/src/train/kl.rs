use crate::error::{Error, Result};
use crate::mdp::TokenMdp;
use crate::policy::PolicyTable;

/// Weighting of the per-state KL terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlConvention {
    /// KL between the induced sequence distributions (undiscounted reach
    /// probabilities).
    #[default]
    Trajectory,
    /// Reach probabilities additionally weighted by `γ^depth`.
    Discounted,
    /// Discounted if the MDP has `γ < 1`, trajectory otherwise. Rejected
    /// when `γ < 1`, since the caller did not say which one it meant.
    FollowMdp,
}

/// `KL(π ∥ π_ref)` of the induced response distributions, prompts uniform.
/// For deterministic transitions this equals `Σ_s P_π(s) KL(π(·|s) ∥ π_ref(·|s))`.
pub fn kl_to_reference(mdp: &TokenMdp, policy: &PolicyTable, reference: &PolicyTable) -> f64 {
    kl_with(mdp, policy, reference, 1.0)
}

pub fn kl_to_reference_with(
    mdp: &TokenMdp,
    policy: &PolicyTable,
    reference: &PolicyTable,
    convention: KlConvention,
) -> Result<f64> {
    let gamma = mdp.gamma();
    match convention {
        KlConvention::Trajectory => Ok(kl_with(mdp, policy, reference, 1.0)),
        KlConvention::Discounted => Ok(kl_with(mdp, policy, reference, gamma)),
        KlConvention::FollowMdp if gamma < 1.0 => Err(Error::GammaUnsupported(gamma)),
        KlConvention::FollowMdp => Ok(kl_with(mdp, policy, reference, 1.0)),
    }
}

fn kl_with(mdp: &TokenMdp, policy: &PolicyTable, reference: &PolicyTable, discount: f64) -> f64 {
    let tree = mdp.tree();
    let vocab = tree.vocab();
    let mut reach = vec![0.0; tree.len()];
    for p in 0..tree.n_prompts() {
        reach[tree.root(p)] = 1.0 / tree.n_prompts() as f64;
    }
    let mut total = 0.0;
    for s in 0..tree.len() {
        let Some(nt) = tree.nt_index(s) else { continue };
        let mut kl = 0.0;
        for a in 0..vocab {
            let p = policy.prob(nt, a);
            if p > 0.0 {
                kl += p * (p / reference.prob(nt, a)).ln();
            }
            reach[tree.child(s, a)] = reach[s] * p;
        }
        total += discount.powi(tree.depth(s) as i32) * reach[s] * kl;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_policies() {
        let mdp = TokenMdp::random(3, 3, 2, 1.0, (-1.0, 1.0), 0).unwrap();
        let p = PolicyTable::random(mdp.tree(), 1.0, 4);
        assert_eq!(kl_to_reference(&mdp, &p, &p), 0.0);
    }

    #[test]
    fn one_step_two_term_value() {
        let mdp = TokenMdp::new(2, 1, vec![vec![0]], None, 1.0, 10).unwrap();
        let p = PolicyTable::from_probs(mdp.tree(), vec![0.9, 0.1]).unwrap();
        let u = PolicyTable::uniform(mdp.tree());
        let expect = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((kl_to_reference(&mdp, &p, &u) - expect).abs() < 1e-15);
        assert!((kl_to_reference(&mdp, &p, &u) - 0.368).abs() < 1e-3);
    }

    #[test]
    fn matches_sequence_level_kl() {
        let mdp = TokenMdp::new(3, 3, vec![vec![0], vec![1]], Some(2), 1.0, 1000).unwrap();
        let tree = mdp.tree();
        let p = PolicyTable::random(tree, 1.5, 1);
        let q = PolicyTable::random(tree, 1.5, 2);
        let direct: f64 = tree
            .terminal_states()
            .map(|s| {
                let lp = p.path_log_prob(tree, s);
                let lq = q.path_log_prob(tree, s);
                0.5 * lp.exp() * (lp - lq)
            })
            .sum();
        assert!((kl_to_reference(&mdp, &p, &q) - direct).abs() < 1e-12);
    }

    #[test]
    fn implicit_discount_rejected() {
        let mdp = TokenMdp::random(2, 2, 1, 0.9, (-1.0, 1.0), 0).unwrap();
        let p = PolicyTable::uniform(mdp.tree());
        assert!(matches!(
            kl_to_reference_with(&mdp, &p, &p, KlConvention::FollowMdp),
            Err(Error::GammaUnsupported(_))
        ));
        assert!(kl_to_reference_with(&mdp, &p, &p, KlConvention::Discounted).is_ok());
    }
}
