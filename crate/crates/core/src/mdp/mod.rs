//! Finite token-level MDPs with deterministic append transitions.
//!
//! States are `(prompt, response)` prefixes, actions are next tokens and
//! `s ⊕ a` appends the token. A state is terminal when its response reaches
//! the horizon or ends with the end-of-sequence token. Prompts are drawn
//! uniformly at the start of an episode.

mod data;
mod occupancy;
mod tree;

pub use data::{
    build_preference_pairs, build_preference_pairs_with, exhaustive_demonstrations,
    sample_demonstrations, sample_demonstrations_with, sample_response, Demonstration,
    PreferencePair,
};
pub use occupancy::{f_divergence_between, occupancy, occupancy_on, OccupancyMeasure};
pub use tree::{count_states, State, StateTree, DEFAULT_STATE_CAP};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense per-(non-terminal state, action) reward table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTable {
    vocab: usize,
    values: Vec<f64>,
}

impl RewardTable {
    pub fn zeros(tree: &StateTree) -> Self {
        RewardTable {
            vocab: tree.vocab(),
            values: vec![0.0; tree.n_nonterminal() * tree.vocab()],
        }
    }

    pub fn from_values(tree: &StateTree, values: Vec<f64>) -> Result<Self> {
        if values.len() != tree.n_nonterminal() * tree.vocab() {
            return Err(Error::LengthMismatch {
                left: values.len(),
                right: tree.n_nonterminal() * tree.vocab(),
            });
        }
        Ok(RewardTable {
            vocab: tree.vocab(),
            values,
        })
    }

    pub fn from_fn(tree: &StateTree, mut f: impl FnMut(&State, u32) -> f64) -> Self {
        let mut values = Vec::with_capacity(tree.n_nonterminal() * tree.vocab());
        for k in 0..tree.n_nonterminal() {
            let st = tree.state(tree.nt_state(k));
            for a in 0..tree.vocab() {
                values.push(f(&st, a as u32));
            }
        }
        RewardTable {
            vocab: tree.vocab(),
            values,
        }
    }

    /// Reward of action `a` at non-terminal index `nt`.
    pub fn get(&self, nt: usize, a: usize) -> f64 {
        self.values[nt * self.vocab + a]
    }

    pub fn set(&mut self, nt: usize, a: usize, value: f64) {
        self.values[nt * self.vocab + a] = value;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn scaled(&self, c: f64) -> Self {
        RewardTable {
            vocab: self.vocab,
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    pub fn negated(&self) -> Self {
        self.scaled(-1.0)
    }
}

/// One explicit `(state, action) → reward` entry of a table specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardEntry {
    pub prompt: usize,
    #[serde(default)]
    pub response: Vec<u32>,
    pub action: u32,
    pub value: f64,
}

/// How the ground-truth reward is specified in an MDP definition file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardSpec {
    /// Explicit entries; unlisted pairs take `default`.
    Table {
        #[serde(default)]
        default: f64,
        #[serde(default)]
        entries: Vec<RewardEntry>,
    },
    /// i.i.d. uniform rewards on `[low, high)`.
    Uniform { seed: u64, low: f64, high: f64 },
    /// i.i.d. normal rewards.
    Normal { seed: u64, mean: f64, std: f64 },
}

impl RewardSpec {
    pub fn resolve(&self, tree: &StateTree) -> Result<RewardTable> {
        let n = tree.n_nonterminal() * tree.vocab();
        match self {
            RewardSpec::Table { default, entries } => {
                let mut table = RewardTable::from_values(tree, vec![*default; n])?;
                for e in entries {
                    let state = State {
                        prompt_id: e.prompt,
                        response: e.response.clone(),
                    };
                    let nt = tree
                        .index_of(&state)
                        .and_then(|s| tree.nt_index(s))
                        .ok_or_else(|| {
                            Error::config(
                                "reward.entries",
                                format!("{state:?} is not a non-terminal state"),
                            )
                        })?;
                    if e.action as usize >= tree.vocab() {
                        return Err(Error::config(
                            "reward.entries.action",
                            format!("action {} outside vocabulary", e.action),
                        ));
                    }
                    table.set(nt, e.action as usize, e.value);
                }
                Ok(table)
            }
            RewardSpec::Uniform { seed, low, high } => {
                if !(low < high) {
                    return Err(Error::config("reward", "uniform requires low < high"));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let values = (0..n).map(|_| rng.gen_range(*low..*high)).collect();
                RewardTable::from_values(tree, values)
            }
            RewardSpec::Normal { seed, mean, std } => {
                let dist = Normal::new(*mean, *std)
                    .map_err(|e| Error::config("reward.std", e.to_string()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let values = (0..n).map(|_| dist.sample(&mut rng)).collect();
                RewardTable::from_values(tree, values)
            }
        }
    }
}

/// On-disk schema of an MDP definition.
///
/// ```toml
/// vocab_size = 3
/// horizon = 2
/// gamma = 1.0
/// eos = 2            # optional
/// prompts = [[0], [1, 1]]
///
/// [reward]
/// kind = "uniform"   # or "normal" / "table"
/// seed = 7
/// low = -1.0
/// high = 1.0
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpFile {
    pub vocab_size: usize,
    pub horizon: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub eos: Option<u32>,
    pub prompts: Vec<Vec<u32>>,
    pub reward: RewardSpec,
    #[serde(default)]
    pub state_cap: Option<usize>,
}

fn default_gamma() -> f64 {
    1.0
}

impl MdpFile {
    pub fn build(&self) -> Result<TokenMdp> {
        let mut mdp = TokenMdp::new(
            self.vocab_size,
            self.horizon,
            self.prompts.clone(),
            self.eos,
            self.gamma,
            self.state_cap.unwrap_or(DEFAULT_STATE_CAP),
        )?;
        let reward = self.reward.resolve(mdp.tree())?;
        mdp.set_reward(reward);
        Ok(mdp)
    }
}

/// A finite token-tree decision process with a ground-truth reward.
#[derive(Debug, Clone)]
pub struct TokenMdp {
    prompts: Vec<Vec<u32>>,
    gamma: f64,
    tree: StateTree,
    reward: RewardTable,
}

impl TokenMdp {
    /// Build an MDP with zero reward. `state_cap` bounds the enumeration.
    pub fn new(
        vocab_size: usize,
        horizon: usize,
        prompts: Vec<Vec<u32>>,
        eos: Option<u32>,
        gamma: f64,
        state_cap: usize,
    ) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidMdp(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        let tree = StateTree::build(vocab_size, horizon, prompts.len(), eos, state_cap)?;
        let reward = RewardTable::zeros(&tree);
        Ok(TokenMdp {
            prompts,
            gamma,
            tree,
            reward,
        })
    }

    /// Convenience constructor: `n_prompts` prompts `[0], [1], ...` and
    /// uniform random rewards on `[low, high)`.
    pub fn random(
        vocab_size: usize,
        horizon: usize,
        n_prompts: usize,
        gamma: f64,
        (low, high): (f64, f64),
        seed: u64,
    ) -> Result<Self> {
        let prompts = (0..n_prompts as u32).map(|p| vec![p]).collect();
        let mut mdp = TokenMdp::new(vocab_size, horizon, prompts, None, gamma, DEFAULT_STATE_CAP)?;
        let reward = RewardSpec::Uniform { seed, low, high }.resolve(mdp.tree())?;
        mdp.set_reward(reward);
        Ok(mdp)
    }

    pub fn with_reward(mut self, reward: RewardTable) -> Self {
        self.set_reward(reward);
        self
    }

    pub fn set_reward(&mut self, reward: RewardTable) {
        assert_eq!(
            reward.values.len(),
            self.tree.n_nonterminal() * self.tree.vocab(),
            "reward table does not match the state tree"
        );
        self.reward = reward;
    }

    pub fn tree(&self) -> &StateTree {
        &self.tree
    }

    pub fn reward(&self) -> &RewardTable {
        &self.reward
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidMdp(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        self.gamma = gamma;
        Ok(self)
    }

    pub fn vocab_size(&self) -> usize {
        self.tree.vocab()
    }

    pub fn horizon(&self) -> usize {
        self.tree.horizon()
    }

    pub fn prompts(&self) -> &[Vec<u32>] {
        &self.prompts
    }

    pub fn n_prompts(&self) -> usize {
        self.prompts.len()
    }

    /// All states in breadth-first prefix order (terminals included, sink
    /// excluded).
    pub fn enumerate_states(&self) -> Vec<State> {
        self.tree.states()
    }

    /// Discounted return `Σ γᵗ r(sₜ, aₜ)` of the trajectory ending at state
    /// index `s`, under an arbitrary reward table.
    pub fn return_to(&self, reward: &RewardTable, s: usize) -> f64 {
        let mut total = 0.0;
        let mut discount = 1.0;
        for (state, a) in self.tree.path(s) {
            let nt = self.tree.nt_index(state).expect("path states are non-terminal");
            total += discount * reward.get(nt, a);
            discount *= self.gamma;
        }
        total
    }

    /// Discounted ground-truth return of a complete response.
    pub fn sequence_return(&self, prompt_id: usize, response: &[u32]) -> Result<f64> {
        let s = self.terminal_index(prompt_id, response)?;
        Ok(self.return_to(&self.reward, s))
    }

    /// State index of a terminal response, or an error if it does not end
    /// in a terminal state.
    pub fn terminal_index(&self, prompt_id: usize, response: &[u32]) -> Result<usize> {
        let state = State {
            prompt_id,
            response: response.to_vec(),
        };
        match self.tree.index_of(&state) {
            Some(s) if self.tree.is_terminal(s) => Ok(s),
            _ => Err(Error::NotTerminal),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_reward_spec_resolves_entries() {
        let file: MdpFile = toml::from_str(
            r#"
            vocab_size = 2
            horizon = 2
            prompts = [[0]]
            [reward]
            kind = "table"
            default = 0.5
            entries = [{ prompt = 0, response = [1], action = 0, value = -2.0 }]
            "#,
        )
        .unwrap();
        let mdp = file.build().unwrap();
        assert_eq!(mdp.sequence_return(0, &[1, 0]).unwrap(), 0.5 - 2.0);
        assert_eq!(mdp.sequence_return(0, &[0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn table_entry_on_terminal_state_is_rejected() {
        let spec = RewardSpec::Table {
            default: 0.0,
            entries: vec![RewardEntry {
                prompt: 0,
                response: vec![0, 0],
                action: 0,
                value: 1.0,
            }],
        };
        let tree = StateTree::build(2, 2, 1, None, 100).unwrap();
        assert!(spec.resolve(&tree).is_err());
    }

    #[test]
    fn random_rewards_are_seeded() {
        let a = TokenMdp::random(3, 2, 2, 1.0, (-1.0, 1.0), 11).unwrap();
        let b = TokenMdp::random(3, 2, 2, 1.0, (-1.0, 1.0), 11).unwrap();
        assert_eq!(a.reward(), b.reward());
        assert!(a.reward().values().iter().all(|v| (-1.0..1.0).contains(v)));
    }

    #[test]
    fn discounted_return() {
        let mdp = TokenMdp::new(2, 2, vec![vec![0]], None, 0.5, 100)
            .unwrap();
        let reward = RewardTable::from_fn(mdp.tree(), |_, _| 1.0);
        let mdp = mdp.with_reward(reward);
        assert_eq!(mdp.sequence_return(0, &[0, 1]).unwrap(), 1.5);
        assert!(mdp.sequence_return(0, &[0]).is_err());
    }

    #[test]
    fn gamma_is_validated() {
        assert!(TokenMdp::new(2, 2, vec![vec![]], None, 0.0, 100).is_err());
        assert!(TokenMdp::new(2, 2, vec![vec![]], None, 1.5, 100).is_err());
    }
}
