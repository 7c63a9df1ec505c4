use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result of a central-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `max |analytic − numeric| / max(1, |numeric|)` over checked indices.
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: Vec<usize>,
}

/// `n` distinct indices out of `0..len` (all of them if `n ≥ len`), sorted.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    if n >= len {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, len, n).into_vec();
    idx.sort_unstable();
    idx
}

/// Compare an analytic gradient of `loss` at `params` against central
/// differences on the given indices.
///
/// `loss` maps a parameter vector to `(value, gradient)`; only the value is
/// used at perturbed points.
pub fn finite_difference_check<F>(mut loss: F, params: &[f64], epsilon: f64, indices: &[usize]) -> GradCheck
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    assert!(
        (1e-7..=1e-3).contains(&epsilon),
        "epsilon {epsilon} outside [1e-7, 1e-3]"
    );
    let (_, analytic) = loss(params);
    let mut work = params.to_vec();
    let mut worst = 0.0;
    let mut worst_index = None;
    for &i in indices {
        let orig = work[i];
        work[i] = orig + epsilon;
        let (plus, _) = loss(&work);
        work[i] = orig - epsilon;
        let (minus, _) = loss(&work);
        work[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        if err > worst || worst_index.is_none() {
            worst = err;
            worst_index = Some(i);
        }
    }
    GradCheck {
        max_rel_error: worst,
        worst_index,
        checked: indices.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let f = |x: &[f64]| {
            let v = x.iter().map(|v| v * v).sum::<f64>();
            (v, x.iter().map(|v| 2.0 * v).collect())
        };
        let r = finite_difference_check(f, &[0.3, -1.2, 2.0], 1e-5, &[0, 1, 2]);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let f = |x: &[f64]| (x[0] * x[0], vec![x[0]]);
        let r = finite_difference_check(f, &[1.0], 1e-5, &[0]);
        assert!(r.max_rel_error > 0.4);
    }

    #[test]
    fn indices_are_distinct() {
        let idx = sample_indices(100, 10, 3);
        assert_eq!(idx.len(), 10);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_indices(4, 10, 3), vec![0, 1, 2, 3]);
    }
}
