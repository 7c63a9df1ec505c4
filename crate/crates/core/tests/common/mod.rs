// Shared fixtures for the integration tests.
#![allow(dead_code)]

use sftlab::mdp::{State, TokenMdp};
use sftlab::policy::PolicyTable;

pub fn mdp(vocab: usize, horizon: usize, n_prompts: usize, gamma: f64, seed: u64) -> TokenMdp {
    TokenMdp::random(vocab, horizon, n_prompts, gamma, (-1.0, 1.0), seed).unwrap()
}

pub fn is_done(mdp: &TokenMdp, st: &State) -> bool {
    st.response.len() == mdp.horizon() || (mdp.tree().eos().is_some() && st.response.last().copied() == mdp.tree().eos())
}

/// Every complete response per prompt, by plain recursion.
pub fn all_responses(mdp: &TokenMdp) -> Vec<State> {
    fn go(mdp: &TokenMdp, st: State, out: &mut Vec<State>) {
        if is_done(mdp, &st) {
            out.push(st);
            return;
        }
        for a in 0..mdp.vocab_size() as u32 {
            go(mdp, st.append(a), out);
        }
    }
    let mut out = Vec::new();
    for p in 0..mdp.n_prompts() {
        go(mdp, State::root(p), &mut out);
    }
    out
}

/// `π(a|state)` looked up through the public tree API.
pub fn prob(mdp: &TokenMdp, policy: &PolicyTable, st: &State, a: u32) -> f64 {
    let tree = mdp.tree();
    let nt = tree.nt_index(tree.index_of(st).unwrap()).unwrap();
    policy.prob(nt, a as usize)
}

pub fn reward(mdp: &TokenMdp, st: &State, a: u32) -> f64 {
    let tree = mdp.tree();
    let nt = tree.nt_index(tree.index_of(st).unwrap()).unwrap();
    mdp.reward().get(nt, a as usize)
}

/// `(prefix, action)` steps of a complete response.
pub fn steps(st: &State) -> Vec<(State, u32)> {
    (0..st.response.len())
        .map(|t| {
            (
                State {
                    prompt_id: st.prompt_id,
                    response: st.response[..t].to_vec(),
                },
                st.response[t],
            )
        })
        .collect()
}

pub fn seq_prob(mdp: &TokenMdp, policy: &PolicyTable, st: &State) -> f64 {
    steps(st).iter().map(|(s, a)| prob(mdp, policy, s, *a)).product()
}
