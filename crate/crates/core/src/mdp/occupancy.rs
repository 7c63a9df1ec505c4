use serde::{Deserialize, Serialize};

use super::{StateTree, TokenMdp};
use crate::divergence::FDivergenceSpec;
use crate::error::{Error, Result};
use crate::policy::PolicyTable;

/// Discounted state and state-action occupancy of a policy.
///
/// `rho` is indexed by state (terminal states included, each carrying the
/// mass of the single time step at which it is visited). `mu` is indexed by
/// `(non-terminal index, action)`. After a terminal state the process moves
/// to an absorbing zero-reward sink whose accumulated mass is `sink`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMeasure {
    pub vocab: usize,
    pub rho: Vec<f64>,
    pub mu: Vec<f64>,
    pub sink: f64,
    /// Mass at terminal states (part of `rho`, reported separately).
    pub terminal_mass: f64,
}

impl OccupancyMeasure {
    pub fn mu(&self, nt: usize, a: usize) -> f64 {
        self.mu[nt * self.vocab + a]
    }

    /// Mass not carried by any `(s, a)` pair: terminal states plus the sink.
    /// Together with `Σ mu` this sums to one.
    pub fn absorbed_mass(&self) -> f64 {
        self.terminal_mass + self.sink
    }

    /// `Σ ρ` over enumerated states plus the sink mass.
    pub fn total_mass(&self) -> f64 {
        self.rho.iter().sum::<f64>() + self.sink
    }
}

/// Exact occupancy by one forward pass over the breadth-first state order:
/// `ρ(s) = (1−γ) γ^depth(s) P(reach s)` and `μ(s,a) = π(a|s) ρ(s)`.
pub fn occupancy(mdp: &TokenMdp, policy: &PolicyTable) -> Result<OccupancyMeasure> {
    occupancy_on(mdp.tree(), mdp.gamma(), policy)
}

/// [`occupancy`] on a bare tree with an explicit discount.
pub fn occupancy_on(tree: &StateTree, gamma: f64, policy: &PolicyTable) -> Result<OccupancyMeasure> {
    if gamma >= 1.0 {
        return Err(Error::GammaOne(gamma));
    }
    let v = tree.vocab();
    if policy.vocab() != v || policy.n_rows() != tree.n_nonterminal() {
        return Err(Error::MeasureMismatch);
    }
    let mut reach = vec![0.0; tree.len()];
    let p0 = 1.0 / tree.n_prompts() as f64;
    for p in 0..tree.n_prompts() {
        reach[tree.root(p)] = p0;
    }
    let mut rho = vec![0.0; tree.len()];
    let mut mu = vec![0.0; tree.n_nonterminal() * v];
    let mut sink = 0.0;
    let mut terminal_mass = 0.0;
    for s in 0..tree.len() {
        let discount = gamma.powi(tree.depth(s) as i32);
        rho[s] = (1.0 - gamma) * discount * reach[s];
        match tree.nt_index(s) {
            Some(nt) => {
                for a in 0..v {
                    let pa = policy.prob(nt, a);
                    mu[nt * v + a] = pa * rho[s];
                    reach[tree.child(s, a)] = reach[s] * pa;
                }
            }
            None => {
                terminal_mass += rho[s];
                sink += discount * gamma * reach[s];
            }
        }
    }
    Ok(OccupancyMeasure {
        vocab: v,
        rho,
        mu,
        sink,
        terminal_mass,
    })
}

/// `D_f(μ_π ∥ μ_E) = Σ μ_E f(μ_π / μ_E)` over state-action pairs, with the
/// absorbed mass treated as one extra outcome so both arguments are
/// probability distributions.
///
/// Pairs with `μ_E = 0` contribute 0 when `μ_π = 0` and
/// `f'(∞)·μ_π` otherwise; an unbounded slope yields `f64::INFINITY`.
pub fn f_divergence_between(
    mu_p: &OccupancyMeasure,
    mu_e: &OccupancyMeasure,
    spec: &FDivergenceSpec,
) -> Result<f64> {
    if mu_p.mu.len() != mu_e.mu.len() || mu_p.vocab != mu_e.vocab {
        return Err(Error::MeasureMismatch);
    }
    let pairs = mu_p
        .mu
        .iter()
        .copied()
        .zip(mu_e.mu.iter().copied())
        .chain(std::iter::once((mu_p.absorbed_mass(), mu_e.absorbed_mass())));
    Ok(spec.divergence(pairs).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::builtin;
    use crate::mdp::TokenMdp;

    fn mdp(vocab: usize, horizon: usize, gamma: f64) -> TokenMdp {
        TokenMdp::new(vocab, horizon, vec![vec![0]], None, gamma, 1000).unwrap()
    }

    #[test]
    fn deterministic_chain() {
        let m = mdp(2, 2, 0.5);
        let occ = occupancy(&m, &PolicyTable::constant(m.tree(), 0)).unwrap();
        let t = m.tree();
        assert_eq!(occ.rho[0], 0.5);
        assert_eq!(occ.rho[t.child(0, 0)], 0.25);
        assert_eq!(occ.absorbed_mass(), 0.25);
        assert!((occ.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_depth_one_mass() {
        let m = mdp(2, 2, 0.5);
        let occ = occupancy(&m, &PolicyTable::uniform(m.tree())).unwrap();
        for a in 0..2 {
            assert!((occ.rho[m.tree().child(0, a)] - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn gamma_one_rejected() {
        let m = mdp(2, 2, 1.0);
        assert!(matches!(
            occupancy(&m, &PolicyTable::uniform(m.tree())),
            Err(Error::GammaOne(_))
        ));
    }

    #[test]
    fn mass_and_product_invariants() {
        let m = TokenMdp::new(3, 3, vec![vec![0], vec![1]], Some(1), 0.8, 1000).unwrap();
        let pi = PolicyTable::random(m.tree(), 2.0, 5);
        let occ = occupancy(&m, &pi).unwrap();
        assert!((occ.total_mass() - 1.0).abs() < 1e-9);
        let mu_sum: f64 = occ.mu.iter().sum();
        assert!((mu_sum + occ.absorbed_mass() - 1.0).abs() < 1e-9);
        let t = m.tree();
        for k in 0..t.n_nonterminal() {
            for a in 0..3 {
                let expect = pi.prob(k, a) * occ.rho[t.nt_state(k)];
                assert!((occ.mu(k, a) - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn divergence_of_identical_measures_is_zero() {
        let m = mdp(3, 2, 0.9);
        let occ = occupancy(&m, &PolicyTable::random(m.tree(), 1.0, 2)).unwrap();
        for spec in builtin() {
            assert_eq!(f_divergence_between(&occ, &occ, &spec).unwrap(), 0.0, "{}", spec.name);
        }
    }
}
