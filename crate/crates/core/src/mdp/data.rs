use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TokenMdp;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::policy::PolicyTable;

/// Trajectories sampled per generator stream.
const CHUNK: usize = 1024;

/// One expert trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub prompt_id: usize,
    pub response: Vec<u32>,
    /// Discounted ground-truth return of the trajectory.
    #[serde(rename = "return")]
    pub ret: f64,
    /// Sample weight; 1 for sampled data, the exact sequence probability
    /// for exhaustive data.
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

/// A labeled pair of distinct complete responses to the same prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt_id: usize,
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
    /// Return of `chosen` minus return of `rejected`; positive.
    pub margin: f64,
}

impl PreferencePair {
    /// Label two complete responses by true return. Equal returns yield
    /// `None` (the pair is dropped).
    pub fn from_responses(
        mdp: &TokenMdp,
        prompt_id: usize,
        a: &[u32],
        b: &[u32],
    ) -> Result<Option<Self>> {
        let ra = mdp.sequence_return(prompt_id, a)?;
        let rb = mdp.sequence_return(prompt_id, b)?;
        Ok(if ra > rb {
            Some(PreferencePair {
                prompt_id,
                chosen: a.to_vec(),
                rejected: b.to_vec(),
                margin: ra - rb,
            })
        } else if rb > ra {
            Some(PreferencePair {
                prompt_id,
                chosen: b.to_vec(),
                rejected: a.to_vec(),
                margin: rb - ra,
            })
        } else {
            None
        })
    }
}

/// Roll out `policy` from the root of `prompt_id`; returns the terminal
/// state index.
pub fn sample_response<R: Rng + ?Sized>(
    mdp: &TokenMdp,
    policy: &PolicyTable,
    prompt_id: usize,
    rng: &mut R,
) -> usize {
    let tree = mdp.tree();
    let mut s = tree.root(prompt_id);
    while let Some(nt) = tree.nt_index(s) {
        s = tree.child(s, policy.sample(nt, rng));
    }
    s
}

fn chunk_rng(seed: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk as u64);
    rng
}

fn demo_at(mdp: &TokenMdp, s: usize, weight: f64) -> Demonstration {
    let st = mdp.tree().state(s);
    Demonstration {
        prompt_id: st.prompt_id,
        ret: mdp.return_to(mdp.reward(), s),
        response: st.response,
        weight,
    }
}

/// `n` i.i.d. trajectories: prompt uniform, then the policy's rollout.
pub fn sample_demonstrations(
    mdp: &TokenMdp,
    policy: &PolicyTable,
    n: usize,
    seed: u64,
) -> Vec<Demonstration> {
    sample_demonstrations_with(Exec::default(), mdp, policy, n, seed)
}

/// [`sample_demonstrations`] with an explicit execution strategy. Output is
/// identical for every strategy: each fixed-size chunk owns its own
/// generator stream derived from `seed`.
pub fn sample_demonstrations_with(
    exec: Exec,
    mdp: &TokenMdp,
    policy: &PolicyTable,
    n: usize,
    seed: u64,
) -> Vec<Demonstration> {
    let chunks = n.div_ceil(CHUNK);
    exec.map_range(chunks, |c| {
        let mut rng = chunk_rng(seed, c);
        let len = CHUNK.min(n - c * CHUNK);
        (0..len)
            .map(|_| {
                let prompt = rng.gen_range(0..mdp.n_prompts());
                let s = sample_response(mdp, policy, prompt, &mut rng);
                demo_at(mdp, s, 1.0)
            })
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Every complete response, weighted by its exact probability under
/// `policy` (prompts uniform). Weights sum to one.
pub fn exhaustive_demonstrations(mdp: &TokenMdp, policy: &PolicyTable) -> Vec<Demonstration> {
    let tree = mdp.tree();
    let p0 = (1.0 / tree.n_prompts() as f64).ln();
    tree.terminal_states()
        .map(|s| demo_at(mdp, s, (p0 + policy.path_log_prob(tree, s)).exp()))
        .collect()
}

/// Preference pairs labeled by true return.
pub fn build_preference_pairs(
    mdp: &TokenMdp,
    sampler: &PolicyTable,
    n: usize,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    build_preference_pairs_with(Exec::default(), mdp, sampler, n, seed)
}

/// Draws `n` candidate pairs. For each, a prompt is chosen uniformly and two
/// responses are sampled; if they coincide the second is replaced by a
/// uniformly chosen different complete response. Ties in return are dropped,
/// so fewer than `n` pairs may be returned.
pub fn build_preference_pairs_with(
    exec: Exec,
    mdp: &TokenMdp,
    sampler: &PolicyTable,
    n: usize,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    let tree = mdp.tree();
    let mut terminals: Vec<Vec<usize>> = vec![Vec::new(); tree.n_prompts()];
    for s in tree.terminal_states() {
        terminals[tree.prompt_of(s)].push(s);
    }
    if let Some(p) = terminals.iter().position(|t| t.len() < 2) {
        return Err(Error::DegeneratePrompt(p));
    }
    let chunks = n.div_ceil(CHUNK);
    let drawn = exec.map_range(chunks, |c| {
        // separate stream family from demonstrations drawn with the same seed
        let mut rng = chunk_rng(seed ^ 0x9e37_79b9_7f4a_7c15, c);
        let len = CHUNK.min(n - c * CHUNK);
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let prompt = rng.gen_range(0..mdp.n_prompts());
            let a = sample_response(mdp, sampler, prompt, &mut rng);
            let mut b = sample_response(mdp, sampler, prompt, &mut rng);
            if a == b {
                let others = &terminals[prompt];
                let pick = rng.gen_range(0..others.len() - 1);
                let pos = others.iter().position(|&s| s == a).unwrap();
                b = others[if pick >= pos { pick + 1 } else { pick }];
            }
            let ra = tree.state(a).response;
            let rb = tree.state(b).response;
            out.push(PreferencePair::from_responses(mdp, prompt, &ra, &rb));
        }
        out
    });
    let mut pairs = Vec::new();
    for r in drawn.into_iter().flatten() {
        if let Some(p) = r? {
            pairs.push(p);
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{RewardTable, TokenMdp};

    #[test]
    fn deterministic_policy_gives_identical_responses() {
        let mdp = TokenMdp::random(3, 3, 1, 1.0, (-1.0, 1.0), 1).unwrap();
        let demos = sample_demonstrations(&mdp, &PolicyTable::constant(mdp.tree(), 1), 50, 4);
        assert!(demos.iter().all(|d| d.response == vec![1, 1, 1]));
    }

    #[test]
    fn same_seed_same_bytes_across_strategies() {
        let mdp = TokenMdp::random(3, 3, 2, 1.0, (-1.0, 1.0), 1).unwrap();
        let pi = PolicyTable::random(mdp.tree(), 1.0, 8);
        let a = sample_demonstrations_with(Exec::Sequential, &mdp, &pi, 3000, 77);
        let b = sample_demonstrations_with(Exec::Parallel, &mdp, &pi, 3000, 77);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn preference_ordering_and_ties() {
        let mdp = TokenMdp::new(2, 1, vec![vec![0]], None, 1.0, 10).unwrap();
        let reward = RewardTable::from_values(mdp.tree(), vec![2.0, 1.0]).unwrap();
        let mdp = mdp.with_reward(reward);
        let p = PreferencePair::from_responses(&mdp, 0, &[1], &[0]).unwrap().unwrap();
        assert_eq!(p.chosen, vec![0]);
        assert_eq!(p.margin, 1.0);

        let flat = mdp.clone().with_reward(RewardTable::zeros(mdp.tree()));
        assert!(PreferencePair::from_responses(&flat, 0, &[1], &[0]).unwrap().is_none());
        let pairs = build_preference_pairs(&flat, &PolicyTable::uniform(flat.tree()), 20, 0).unwrap();
        assert!(pairs.is_empty());
    }

    #[test]
    fn single_response_prompt_is_degenerate() {
        let mdp = TokenMdp::new(1, 2, vec![vec![0]], None, 1.0, 10).unwrap();
        let err = build_preference_pairs(&mdp, &PolicyTable::uniform(mdp.tree()), 3, 0).unwrap_err();
        assert!(matches!(err, Error::DegeneratePrompt(0)));
    }

    #[test]
    fn exhaustive_weights_sum_to_one() {
        let mdp = TokenMdp::new(3, 3, vec![vec![0], vec![1]], Some(0), 1.0, 1000).unwrap();
        let demos = exhaustive_demonstrations(&mdp, &PolicyTable::random(mdp.tree(), 1.5, 2));
        let total: f64 = demos.iter().map(|d| d.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pairs_from_deterministic_sampler_are_distinct() {
        let mdp = TokenMdp::random(2, 2, 1, 1.0, (-1.0, 1.0), 3).unwrap();
        let pairs = build_preference_pairs(&mdp, &PolicyTable::constant(mdp.tree(), 0), 30, 1).unwrap();
        assert!(!pairs.is_empty());
        assert!(pairs.iter().all(|p| p.chosen != p.rejected && p.margin > 0.0));
    }
}
