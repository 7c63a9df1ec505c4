//! Reference computations that share no code path with the solvers: plain
//! recursion over token sequences and Monte-Carlo rollouts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::exec::Exec;
use crate::mdp::{RewardTable, State, TokenMdp};
use crate::policy::PolicyTable;

/// Every complete response with its discounted return, by recursion.
pub fn enumerate_returns(mdp: &TokenMdp, reward: &RewardTable) -> Vec<(usize, Vec<u32>, f64)> {
    let tree = mdp.tree();
    let mut out = Vec::new();
    for p in 0..mdp.n_prompts() {
        let mut stack = vec![(State::root(p), 0.0, 1.0)];
        while let Some((st, ret, disc)) = stack.pop() {
            let done = st.response.len() == mdp.horizon()
                || matches!((st.response.last(), tree.eos()), (Some(&t), Some(e)) if t == e);
            if done {
                out.push((p, st.response, ret));
                continue;
            }
            let nt = tree.index_of(&st).and_then(|s| tree.nt_index(s)).expect("reachable state");
            for a in (0..mdp.vocab_size() as u32).rev() {
                let r = reward.get(nt, a as usize);
                stack.push((st.append(a), ret + disc * r, disc * mdp.gamma()));
            }
        }
    }
    out
}

/// Monte-Carlo estimate of `μ(s,a)` with per-entry standard errors.
pub struct McOccupancy {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub absorbed_mean: f64,
    pub absorbed_stderr: f64,
}

/// `n` rollouts; each contributes `(1−γ)γ^t` to the pair taken at time `t`.
pub fn monte_carlo_occupancy(exec: Exec, mdp: &TokenMdp, policy: &PolicyTable, gamma: f64, n: usize, seed: u64) -> McOccupancy {
    const CHUNK: usize = 4096;
    let tree = mdp.tree();
    let vocab = tree.vocab();
    let width = tree.n_nonterminal() * vocab;
    let chunks = n.div_ceil(CHUNK);
    let partial = exec.map_range(chunks, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        let mut sum = vec![0.0; width + 1];
        let mut sq = vec![0.0; width + 1];
        for _ in 0..CHUNK.min(n - c * CHUNK) {
            let mut s = tree.root(rng.gen_range(0..tree.n_prompts()));
            let mut w = 1.0 - gamma;
            let mut total = 0.0;
            while let Some(nt) = tree.nt_index(s) {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut a = vocab - 1;
                for (k, p) in policy.row(nt).iter().enumerate() {
                    acc += p;
                    if u < acc {
                        a = k;
                        break;
                    }
                }
                sum[nt * vocab + a] += w;
                sq[nt * vocab + a] += w * w;
                total += w;
                w *= gamma;
                s = tree.child(s, a);
            }
            let rest = 1.0 - total;
            sum[width] += rest;
            sq[width] += rest * rest;
        }
        (sum, sq)
    });
    let mut sum = vec![0.0; width + 1];
    let mut sq = vec![0.0; width + 1];
    for (s, q) in &partial {
        for i in 0..=width {
            sum[i] += s[i];
            sq[i] += q[i];
        }
    }
    let nf = n as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let stderr: Vec<f64> = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| ((q / nf - m * m).max(0.0) / nf).sqrt())
        .collect();
    McOccupancy {
        absorbed_mean: mean[width],
        absorbed_stderr: stderr[width],
        mean: mean[..width].to_vec(),
        stderr: stderr[..width].to_vec(),
    }
}

/// The λ rule applied directly: halve iff `acc − target < δ`, else double.
pub fn lambda_rule(init: f64, target: f64, delta: f64, accuracies: &[f64]) -> Vec<f64> {
    let mut lam = init;
    let mut out = vec![lam];
    for &a in accuracies {
        lam = if a - target < delta { lam / 2.0 } else { lam * 2.0 };
        out.push(lam);
    }
    out
}
