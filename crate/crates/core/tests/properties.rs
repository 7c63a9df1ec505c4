//! Property tests over random instances.

mod common;

use common::*;
use proptest::prelude::*;
use sftlab::divergence::builtin;
use sftlab::mdp::{occupancy, sample_demonstrations_with};
use sftlab::policy::PolicyTable;
use sftlab::probes::{kendall_tau, logits_q_probe};
use sftlab::soft_rl::{implicit_reward, solve_soft, verify_fixed_point};
use sftlab::train::{partition, LambdaConfig, LambdaController};
use sftlab::Exec;

fn instance() -> impl Strategy<Value = (usize, usize, usize, f64, u64)> {
    (2usize..4, 1usize..4, 1usize..3, prop_oneof![Just(1.0), 0.3f64..0.99], any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn policies_are_normalized((v, h, p, g, seed) in instance(), scale in 0.0f64..5.0) {
        let m = mdp(v, h, p, g, seed);
        let pol = PolicyTable::random(m.tree(), scale, seed);
        for nt in 0..pol.n_rows() {
            let row = pol.row(nt);
            prop_assert!(row.iter().all(|x| *x > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn occupancy_mass_and_state_relation((v, h, p, _g, seed) in instance(), gamma in 0.1f64..0.99) {
        let m = mdp(v, h, p, gamma, seed);
        let tree = m.tree();
        let pol = PolicyTable::random(tree, 1.0, seed ^ 7);
        let occ = occupancy(&m, &pol).unwrap();
        prop_assert!(occ.mu.iter().all(|x| *x >= 0.0));
        prop_assert!((occ.mu.iter().sum::<f64>() + occ.absorbed_mass() - 1.0).abs() < 1e-12);
        for nt in 0..tree.n_nonterminal() {
            let s = tree.nt_state(nt);
            let row: f64 = (0..v).map(|a| occ.mu(nt, a)).sum();
            prop_assert!((row - occ.rho[s]).abs() < 1e-14);
            for a in 0..v {
                prop_assert!((occ.mu(nt, a) - occ.rho[s] * pol.prob(nt, a)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn divergences_are_nonnegative(raw in prop::collection::vec((0.01f64..1.0, 0.01f64..1.0), 2..8)) {
        let sp: f64 = raw.iter().map(|x| x.0).sum();
        let sq: f64 = raw.iter().map(|x| x.1).sum();
        for spec in builtin() {
            let d = spec.divergence(raw.iter().map(|(a, b)| (a / sp, b / sq)));
            prop_assert!(d >= -1e-12, "{} {}", spec.name, d);
            let same = spec.divergence(raw.iter().map(|(a, _)| (a / sp, a / sp)));
            prop_assert!(same.abs() < 1e-12, "{} {}", spec.name, same);
        }
    }

    #[test]
    fn kendall_properties(a in prop::collection::vec(-10.0f64..10.0, 2..12), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = a.iter().map(|_| rng.gen_range(-10.0..10.0)).collect();
        let t = kendall_tau(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&t));
        prop_assert_eq!(t, kendall_tau(&b, &a).unwrap());
        let neg: Vec<f64> = b.iter().map(|x| -x).collect();
        prop_assert!((kendall_tau(&a, &neg).unwrap() + t).abs() < 1e-15);
    }

    #[test]
    fn spread_is_shift_invariant_and_scales((v, h, p, g, seed) in instance(), shift in -50.0f64..50.0, k in 0.1f64..10.0) {
        let m = mdp(v, h, p, g, seed);
        let tree = m.tree();
        let reference = PolicyTable::random(tree, 1.0, seed);
        let sol = solve_soft(&m, m.reward(), 0.5, &reference).unwrap();
        let logits: Vec<f64> = PolicyTable::random(tree, 2.0, seed ^ 3).probs().iter().map(|x| x.ln()).collect();
        let base = logits_q_probe(tree, &logits, &sol, 0.0, 0.5).c_spread;
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        let scaled: Vec<f64> = logits.iter().map(|l| l * k).collect();
        for (i, b) in base.iter().enumerate() {
            prop_assert!((logits_q_probe(tree, &shifted, &sol, 0.0, 0.5).c_spread[i] - b).abs() < 1e-9);
            prop_assert!((logits_q_probe(tree, &scaled, &sol, 0.0, 0.5).c_spread[i] - k * b).abs() < 1e-9 * k.max(1.0));
        }
    }

    #[test]
    fn soft_solution_is_a_fixed_point((v, h, p, g, seed) in instance(), beta in 0.05f64..5.0) {
        let m = mdp(v, h, p, g, seed);
        let reference = PolicyTable::random(m.tree(), 1.0, seed);
        let sol = solve_soft(&m, m.reward(), beta, &reference).unwrap();
        prop_assert!(verify_fixed_point(&sol, &m, m.reward()).max() < 1e-9);
    }

    #[test]
    fn implicit_rewards_telescope((v, h, p, g, seed) in instance(), beta in 0.1f64..3.0) {
        let m = mdp(v, h, p, g, seed);
        let tree = m.tree();
        let reference = PolicyTable::random(tree, 1.0, seed);
        let pol = PolicyTable::random(tree, 1.0, seed ^ 11);
        let values: Vec<f64> = (0..tree.len()).map(|s| if tree.nt_index(s).is_some() { (s as f64).sin() } else { 0.0 }).collect();
        let rep = implicit_reward(&m, &pol, &reference, beta, &values).unwrap();
        let table = rep.per_step_table(tree);
        for seq in &rep.sequences {
            let y = sftlab::mdp::State { prompt_id: seq.prompt_id, response: seq.response.clone() };
            let sum: f64 = steps(&y)
                .iter()
                .enumerate()
                .map(|(t, (s, a))| {
                    let nt = tree.nt_index(tree.index_of(s).unwrap()).unwrap();
                    g.powi(t as i32) * table.get(nt, *a as usize)
                })
                .sum();
            prop_assert!((sum - seq.reward).abs() < 1e-9);
        }
    }

    #[test]
    fn lambda_stays_on_powers_of_two(accs in prop::collection::vec(0.0f64..1.0, 0..40)) {
        let mut c = LambdaController::new(&LambdaConfig { lambda_init: 1.0, ..LambdaConfig::default() });
        for a in accs {
            let l = c.update(a);
            prop_assert_eq!(l.log2().fract(), 0.0);
        }
    }

    #[test]
    fn partition_covers_range(n in 0usize..500, k in 1usize..20) {
        let parts = partition(n, k);
        prop_assert_eq!(parts.len(), k);
        prop_assert_eq!(parts[0].start, 0);
        prop_assert_eq!(parts[k - 1].end, n);
        for w in parts.windows(2) {
            prop_assert_eq!(w[0].end, w[1].start);
        }
        let (lo, hi) = parts.iter().fold((usize::MAX, 0), |(lo, hi), r| (lo.min(r.len()), hi.max(r.len())));
        prop_assert!(hi - lo <= 1);
    }

    #[test]
    fn sampling_is_seed_deterministic((v, h, p, g, seed) in instance(), n in 0usize..3000) {
        let m = mdp(v, h, p, g, seed);
        let pol = PolicyTable::random(m.tree(), 1.0, seed);
        let a = sample_demonstrations_with(Exec::Sequential, &m, &pol, n, seed);
        let b = sample_demonstrations_with(Exec::Parallel, &m, &pol, n, seed);
        prop_assert_eq!(a.len(), n);
        prop_assert_eq!(a, b);
    }
}
