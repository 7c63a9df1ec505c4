//! Policies over the token tree.
//!
//! [`PolicyTable`] is a materialized conditional distribution `π(a|s)` for
//! every non-terminal state and is what the solver, occupancy and KL code
//! consume. [`PolicyModel`] is the differentiable parameterization that the
//! trainers update; `π(a|s) = softmax(l(s)/τ)_a`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::softmax;
use crate::mdp::StateTree;

/// `π(a|s)` for every non-terminal state, rows indexed by the tree's dense
/// non-terminal index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    vocab: usize,
    probs: Vec<f64>,
}

impl PolicyTable {
    pub fn uniform(tree: &StateTree) -> Self {
        let v = tree.vocab();
        PolicyTable {
            vocab: v,
            probs: vec![1.0 / v as f64; tree.n_nonterminal() * v],
        }
    }

    /// Build from row-major probabilities; rows must sum to one.
    pub fn from_probs(tree: &StateTree, probs: Vec<f64>) -> Result<Self> {
        let v = tree.vocab();
        if probs.len() != tree.n_nonterminal() * v {
            return Err(Error::LengthMismatch {
                left: probs.len(),
                right: tree.n_nonterminal() * v,
            });
        }
        for (k, row) in probs.chunks(v).enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidMdp(format!(
                    "policy row {k} is not a distribution (sum {total})"
                )));
            }
        }
        Ok(PolicyTable { vocab: v, probs })
    }

    /// Row-wise `softmax(logits / τ)`.
    pub fn from_logits(vocab: usize, logits: &[f64], temperature: f64) -> Self {
        let probs = logits
            .chunks(vocab)
            .flat_map(|row| softmax(row, temperature))
            .collect();
        PolicyTable { vocab, probs }
    }

    /// Deterministic policy that always emits `action`.
    pub fn constant(tree: &StateTree, action: usize) -> Self {
        let v = tree.vocab();
        let mut probs = vec![0.0; tree.n_nonterminal() * v];
        for row in probs.chunks_mut(v) {
            row[action] = 1.0;
        }
        PolicyTable { vocab: v, probs }
    }

    /// Random strictly positive policy with logits uniform on `[-scale, scale]`.
    pub fn random(tree: &StateTree, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..tree.n_nonterminal() * tree.vocab())
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        PolicyTable::from_logits(tree.vocab(), &logits, 1.0)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn n_rows(&self) -> usize {
        self.probs.len() / self.vocab
    }

    pub fn row(&self, nt: usize) -> &[f64] {
        &self.probs[nt * self.vocab..(nt + 1) * self.vocab]
    }

    pub fn prob(&self, nt: usize, a: usize) -> f64 {
        self.probs[nt * self.vocab + a]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// First `(non-terminal index, action)` with zero probability.
    pub fn first_zero(&self) -> Option<(usize, usize)> {
        self.probs
            .iter()
            .position(|p| *p <= 0.0)
            .map(|i| (i / self.vocab, i % self.vocab))
    }

    /// Draw an action from row `nt` with a single uniform variate.
    pub fn sample<R: Rng + ?Sized>(&self, nt: usize, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let row = self.row(nt);
        let mut acc = 0.0;
        for (a, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        // u landed in the rounding gap above the cumulative sum
        row.iter().rposition(|p| *p > 0.0).unwrap_or(row.len() - 1)
    }

    /// `log π(y|x)` of the trajectory ending at state `s`.
    pub fn path_log_prob(&self, tree: &StateTree, s: usize) -> f64 {
        tree.path(s)
            .into_iter()
            .map(|(state, a)| self.prob(tree.nt_index(state).unwrap(), a).ln())
            .sum()
    }
}

/// Which parameterization a [`PolicyModel`] uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Tabular,
    Featurized,
}

/// Shape of the one-hidden-layer network of a featurized policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub n_prompts: usize,
    pub horizon: usize,
    pub vocab: usize,
    pub hidden: usize,
}

impl MlpShape {
    /// Input width: prompt one-hot followed by one token one-hot per
    /// response position.
    pub fn input_dim(&self) -> usize {
        self.n_prompts + self.horizon * self.vocab
    }

    fn w1(&self) -> usize {
        0
    }
    fn b1(&self) -> usize {
        self.input_dim() * self.hidden
    }
    fn w2(&self) -> usize {
        self.b1() + self.hidden
    }
    fn b2(&self) -> usize {
        self.w2() + self.vocab * self.hidden
    }
    fn n_params(&self) -> usize {
        self.b2() + self.vocab
    }
}

/// Differentiable policy with a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyModel {
    pub kind: PolicyKind,
    pub temperature: f64,
    vocab: usize,
    n_states: usize,
    mlp: Option<MlpShape>,
    params: Vec<f64>,
}

/// Default hidden width of featurized policies.
pub const DEFAULT_HIDDEN: usize = 32;

impl PolicyModel {
    /// Tabular policy with all logits zero (uniform).
    pub fn tabular(tree: &StateTree) -> Self {
        PolicyModel {
            kind: PolicyKind::Tabular,
            temperature: 1.0,
            vocab: tree.vocab(),
            n_states: tree.n_nonterminal(),
            mlp: None,
            params: vec![0.0; tree.n_nonterminal() * tree.vocab()],
        }
    }

    pub fn tabular_from_logits(tree: &StateTree, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != tree.n_nonterminal() * tree.vocab() {
            return Err(Error::LengthMismatch {
                left: logits.len(),
                right: tree.n_nonterminal() * tree.vocab(),
            });
        }
        let mut m = PolicyModel::tabular(tree);
        m.params = logits;
        Ok(m)
    }

    /// Tabular policy with logits uniform on `[-scale, scale]`.
    pub fn random_tabular(tree: &StateTree, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = PolicyModel::tabular(tree);
        for p in &mut m.params {
            *p = rng.gen_range(-scale..=scale);
        }
        m
    }

    /// Featurized policy with seeded initialization: hidden weights
    /// uniform on `±1/√(H+1)`, output weights on `±init_scale/√hidden`.
    pub fn featurized(tree: &StateTree, hidden: usize, init_scale: f64, seed: u64) -> Self {
        let shape = MlpShape {
            n_prompts: tree.n_prompts(),
            horizon: tree.horizon(),
            vocab: tree.vocab(),
            hidden,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; shape.n_params()];
        let s1 = 1.0 / ((tree.horizon() + 1) as f64).sqrt();
        for p in &mut params[shape.w1()..shape.b1()] {
            *p = rng.gen_range(-s1..=s1);
        }
        let s2 = init_scale / (hidden as f64).sqrt();
        for p in &mut params[shape.w2()..shape.b2()] {
            *p = rng.gen_range(-s2..=s2);
        }
        PolicyModel {
            kind: PolicyKind::Featurized,
            temperature: 1.0,
            vocab: tree.vocab(),
            n_states: tree.n_nonterminal(),
            mlp: Some(shape),
            params,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        assert!(temperature > 0.0, "temperature must be positive");
        self.temperature = temperature;
        self
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn check_tree(&self, tree: &StateTree) {
        assert!(
            tree.vocab() == self.vocab && tree.n_nonterminal() == self.n_states,
            "policy model does not match the state tree"
        );
    }

    /// Active input features of state `s` (indices of ones).
    fn active_features(shape: &MlpShape, tree: &StateTree, s: usize) -> Vec<usize> {
        let mut active = vec![tree.prompt_of(s)];
        for (pos, (_, a)) in tree.path(s).into_iter().enumerate() {
            active.push(shape.n_prompts + pos * shape.vocab + a);
        }
        active
    }

    fn mlp_forward(&self, shape: &MlpShape, active: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let p = &self.params;
        let h = shape.hidden;
        let mut pre = p[shape.b1()..shape.b1() + h].to_vec();
        for &i in active {
            let col = &p[shape.w1() + i * h..shape.w1() + (i + 1) * h];
            for (z, w) in pre.iter_mut().zip(col) {
                *z += w;
            }
        }
        let hidden: Vec<f64> = pre.iter().map(|z| z.tanh()).collect();
        let mut out = p[shape.b2()..shape.b2() + shape.vocab].to_vec();
        for (a, o) in out.iter_mut().enumerate() {
            let row = &p[shape.w2() + a * h..shape.w2() + (a + 1) * h];
            *o += row.iter().zip(&hidden).map(|(w, x)| w * x).sum::<f64>();
        }
        (hidden, out)
    }

    /// Raw logits `l(s)` at non-terminal state index `s`.
    pub fn logits_at(&self, tree: &StateTree, s: usize) -> Vec<f64> {
        self.check_tree(tree);
        let nt = tree.nt_index(s).expect("logits are defined on non-terminal states");
        match &self.mlp {
            None => self.params[nt * self.vocab..(nt + 1) * self.vocab].to_vec(),
            Some(shape) => {
                let active = Self::active_features(shape, tree, s);
                self.mlp_forward(shape, &active).1
            }
        }
    }

    /// Logits for every non-terminal state, row-major by non-terminal index.
    pub fn logits_table(&self, tree: &StateTree) -> Vec<f64> {
        self.check_tree(tree);
        match self.mlp {
            None => self.params.clone(),
            Some(_) => (0..tree.n_nonterminal())
                .flat_map(|k| self.logits_at(tree, tree.nt_state(k)))
                .collect(),
        }
    }

    pub fn table(&self, tree: &StateTree) -> PolicyTable {
        PolicyTable::from_logits(self.vocab, &self.logits_table(tree), self.temperature)
    }

    /// Chain rule from logit gradients (row-major by non-terminal index) to
    /// parameter gradients.
    pub fn backward(&self, tree: &StateTree, logit_grad: &[f64]) -> Vec<f64> {
        self.check_tree(tree);
        assert_eq!(logit_grad.len(), self.n_states * self.vocab);
        let Some(shape) = self.mlp else {
            return logit_grad.to_vec();
        };
        let h = shape.hidden;
        let mut grad = vec![0.0; self.params.len()];
        for (nt, g_out) in logit_grad.chunks(self.vocab).enumerate() {
            if g_out.iter().all(|g| *g == 0.0) {
                continue;
            }
            let s = tree.nt_state(nt);
            let active = Self::active_features(&shape, tree, s);
            let (hidden, _) = self.mlp_forward(&shape, &active);
            let mut g_hidden = vec![0.0; h];
            for (a, &g) in g_out.iter().enumerate() {
                grad[shape.b2() + a] += g;
                let row = &self.params[shape.w2() + a * h..shape.w2() + (a + 1) * h];
                for j in 0..h {
                    grad[shape.w2() + a * h + j] += g * hidden[j];
                    g_hidden[j] += g * row[j];
                }
            }
            for j in 0..h {
                let g_pre = g_hidden[j] * (1.0 - hidden[j] * hidden[j]);
                grad[shape.b1() + j] += g_pre;
                for &i in &active {
                    grad[shape.w1() + i * h + j] += g_pre;
                }
            }
        }
        grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree() -> StateTree {
        StateTree::build(3, 2, 2, None, 1000).unwrap()
    }

    #[test]
    fn rows_sum_to_one_and_are_positive() {
        let t = tree();
        let m = PolicyModel::featurized(&t, 8, 1.0, 3).with_temperature(0.7);
        let table = m.table(&t);
        for k in 0..t.n_nonterminal() {
            let row = table.row(k);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|p| *p > 0.0));
        }
    }

    #[test]
    fn featurized_backward_matches_finite_differences() {
        let t = tree();
        let m = PolicyModel::featurized(&t, 5, 1.0, 9);
        // scalar functional: Σ c_i · logits_i with fixed coefficients
        let coeffs: Vec<f64> = (0..t.n_nonterminal() * 3)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0)
            .collect();
        let f = |m: &PolicyModel| -> f64 {
            m.logits_table(&t).iter().zip(&coeffs).map(|(l, c)| l * c).sum()
        };
        let g = m.backward(&t, &coeffs);
        let eps = 1e-6;
        for i in (0..m.n_params()).step_by(7) {
            let mut plus = m.clone();
            plus.params_mut()[i] += eps;
            let mut minus = m.clone();
            minus.params_mut()[i] -= eps;
            let fd = (f(&plus) - f(&minus)) / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-7, "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn sampling_respects_point_masses() {
        let t = tree();
        let p = PolicyTable::constant(&t, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(p.sample(0, &mut rng), 2);
        }
    }

    #[test]
    fn from_probs_validates_rows() {
        let t = StateTree::build(2, 1, 1, None, 10).unwrap();
        assert!(PolicyTable::from_probs(&t, vec![0.6, 0.6]).is_err());
        assert!(PolicyTable::from_probs(&t, vec![0.25, 0.75]).is_ok());
    }
}
