use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on the number of enumerated states.
pub const DEFAULT_STATE_CAP: usize = 200_000;

const NONE: u32 = u32::MAX;

/// A state of the token MDP, identified by its prompt and the response
/// tokens generated so far.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct State {
    pub prompt_id: usize,
    pub response: Vec<u32>,
}

impl State {
    pub fn root(prompt_id: usize) -> Self {
        State {
            prompt_id,
            response: Vec::new(),
        }
    }

    pub fn depth(&self) -> usize {
        self.response.len()
    }

    /// `s ⊕ a`.
    pub fn append(&self, action: u32) -> Self {
        let mut response = self.response.clone();
        response.push(action);
        State {
            prompt_id: self.prompt_id,
            response,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    prompt: u32,
    parent: u32,
    action: u32,
    depth: u32,
    nt: u32,
    first_child: u32,
}

/// Breadth-first enumeration of the prefix forest of a token MDP.
///
/// State indices follow breadth-first prefix order: all roots first, then
/// every depth-1 state, and so on. The children of a non-terminal state are
/// contiguous and ordered by action, so `child(s, a) = first_child(s) + a`.
/// Non-terminal states additionally carry a dense index used by policy and
/// reward tables.
#[derive(Debug, Clone)]
pub struct StateTree {
    vocab: usize,
    horizon: usize,
    n_prompts: usize,
    eos: Option<u32>,
    nodes: Vec<Node>,
    nonterminal: Vec<usize>,
}

/// Number of states of the forest, computed by the depth recurrence without
/// building anything.
pub fn count_states(vocab: usize, horizon: usize, n_prompts: usize, eos: Option<u32>) -> u128 {
    let mut total: u128 = n_prompts as u128;
    let mut open: u128 = if horizon > 0 { n_prompts as u128 } else { 0 };
    let branching = match eos {
        Some(_) => vocab.saturating_sub(1) as u128,
        None => vocab as u128,
    };
    for depth in 1..=horizon {
        let here = open.saturating_mul(vocab as u128);
        total = total.saturating_add(here);
        open = if depth == horizon {
            0
        } else {
            open.saturating_mul(branching)
        };
    }
    total
}

impl StateTree {
    pub fn build(
        vocab: usize,
        horizon: usize,
        n_prompts: usize,
        eos: Option<u32>,
        cap: usize,
    ) -> Result<Self> {
        if vocab == 0 || horizon == 0 || n_prompts == 0 {
            return Err(Error::InvalidMdp(
                "vocab_size, horizon and prompt count must be positive".into(),
            ));
        }
        if let Some(e) = eos {
            if e as usize >= vocab {
                return Err(Error::InvalidMdp(format!(
                    "eos token {e} outside vocabulary of size {vocab}"
                )));
            }
        }
        let count = count_states(vocab, horizon, n_prompts, eos);
        if count > cap as u128 || count >= NONE as u128 {
            return Err(Error::CapExceeded { count, cap });
        }
        let count = count as usize;
        let mut nodes = Vec::with_capacity(count);
        let mut nonterminal = Vec::new();
        for p in 0..n_prompts {
            nodes.push(Node {
                prompt: p as u32,
                parent: NONE,
                action: NONE,
                depth: 0,
                nt: NONE,
                first_child: NONE,
            });
        }
        let mut head = 0;
        while head < nodes.len() {
            let node = nodes[head];
            let terminal = node.depth as usize == horizon
                || (node.depth > 0 && eos == Some(node.action));
            if !terminal {
                nodes[head].nt = nonterminal.len() as u32;
                nonterminal.push(head);
                nodes[head].first_child = nodes.len() as u32;
                for a in 0..vocab {
                    nodes.push(Node {
                        prompt: node.prompt,
                        parent: head as u32,
                        action: a as u32,
                        depth: node.depth + 1,
                        nt: NONE,
                        first_child: NONE,
                    });
                }
            }
            head += 1;
        }
        debug_assert_eq!(nodes.len(), count);
        Ok(StateTree {
            vocab,
            horizon,
            n_prompts,
            eos,
            nodes,
            nonterminal,
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_prompts(&self) -> usize {
        self.n_prompts
    }

    pub fn eos(&self) -> Option<u32> {
        self.eos
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn n_nonterminal(&self) -> usize {
        self.nonterminal.len()
    }

    /// Index of the root state of prompt `p`.
    pub fn root(&self, p: usize) -> usize {
        p
    }

    pub fn depth(&self, s: usize) -> usize {
        self.nodes[s].depth as usize
    }

    pub fn prompt_of(&self, s: usize) -> usize {
        self.nodes[s].prompt as usize
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.nodes[s].nt == NONE
    }

    pub fn parent(&self, s: usize) -> Option<(usize, u32)> {
        let n = self.nodes[s];
        (n.parent != NONE).then_some((n.parent as usize, n.action))
    }

    /// Dense non-terminal index of `s`, if `s` is not terminal.
    pub fn nt_index(&self, s: usize) -> Option<usize> {
        let nt = self.nodes[s].nt;
        (nt != NONE).then_some(nt as usize)
    }

    /// State index of the `k`-th non-terminal state.
    pub fn nt_state(&self, k: usize) -> usize {
        self.nonterminal[k]
    }

    /// `s ⊕ a`. Panics if `s` is terminal.
    pub fn child(&self, s: usize, a: usize) -> usize {
        let n = self.nodes[s];
        assert!(n.nt != NONE, "terminal state has no successors");
        n.first_child as usize + a
    }

    /// Materialize the canonical identity of state `s`.
    pub fn state(&self, s: usize) -> State {
        let mut response = Vec::with_capacity(self.depth(s));
        let mut cur = s;
        while let Some((p, a)) = self.parent(cur) {
            response.push(a);
            cur = p;
        }
        response.reverse();
        State {
            prompt_id: self.prompt_of(s),
            response,
        }
    }

    /// Locate a state by identity.
    pub fn index_of(&self, state: &State) -> Option<usize> {
        if state.prompt_id >= self.n_prompts {
            return None;
        }
        let mut cur = self.root(state.prompt_id);
        for &a in &state.response {
            if self.is_terminal(cur) || a as usize >= self.vocab {
                return None;
            }
            cur = self.child(cur, a as usize);
        }
        Some(cur)
    }

    /// The (non-terminal state, action) pairs visited on the way to `s`.
    pub fn path(&self, s: usize) -> Vec<(usize, usize)> {
        let mut steps = Vec::with_capacity(self.depth(s));
        let mut cur = s;
        while let Some((p, a)) = self.parent(cur) {
            steps.push((p, a as usize));
            cur = p;
        }
        steps.reverse();
        steps
    }

    pub fn terminal_states(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&s| self.is_terminal(s))
    }

    /// Enumerated states in breadth-first prefix order.
    pub fn states(&self) -> Vec<State> {
        (0..self.len()).map(|s| self.state(s)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_counts() {
        assert_eq!(StateTree::build(2, 2, 1, None, 1000).unwrap().len(), 7);
        assert_eq!(StateTree::build(3, 1, 2, None, 1000).unwrap().len(), 8);
        assert_eq!(count_states(2, 2, 1, None), 7);
    }

    #[test]
    fn cap_is_enforced() {
        let err = StateTree::build(10, 6, 1, None, DEFAULT_STATE_CAP).unwrap_err();
        assert!(matches!(err, Error::CapExceeded { .. }));
    }

    #[test]
    fn children_are_contiguous_and_round_trip() {
        let t = StateTree::build(3, 3, 2, Some(2), 10_000).unwrap();
        for s in 0..t.len() {
            let st = t.state(s);
            assert_eq!(t.index_of(&st), Some(s));
            if !t.is_terminal(s) {
                for a in 0..3 {
                    let c = t.child(s, a);
                    assert_eq!(t.parent(c), Some((s, a as u32)));
                    assert_eq!(t.state(c), st.append(a as u32));
                }
            }
        }
    }

    #[test]
    fn breadth_first_order() {
        let t = StateTree::build(2, 3, 2, None, 1000).unwrap();
        let depths: Vec<usize> = (0..t.len()).map(|s| t.depth(s)).collect();
        assert!(depths.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn rejects_bad_eos() {
        assert!(StateTree::build(2, 2, 1, Some(2), 100).is_err());
    }
}
