//! Small numerically careful helpers shared by the solver, losses and probes.

/// `log Σ exp(x)` with max-subtraction. Returns `-inf` for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log Σ w_i exp(x_i)` for non-negative weights.
pub fn weighted_logsumexp(weights: &[f64], xs: &[f64]) -> f64 {
    debug_assert_eq!(weights.len(), xs.len());
    let shifted: Vec<f64> = weights.iter().zip(xs).map(|(w, x)| w.ln() + x).collect();
    logsumexp(&shifted)
}

/// Softmax of `xs / temperature`, written into a fresh vector.
pub fn softmax(xs: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = xs.iter().map(|x| x / temperature).collect();
    let lse = logsumexp(&scaled);
    scaled.iter().map(|x| (x - lse).exp()).collect()
}

/// Log-softmax of `xs / temperature`.
pub fn log_softmax(xs: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = xs.iter().map(|x| x / temperature).collect();
    let lse = logsumexp(&scaled);
    scaled.iter().map(|x| x - lse).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_is_stable_for_large_inputs() {
        let v = logsumexp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let v = logsumexp(&[-1e4, -1e4 - 1.0]);
        assert!(v.is_finite());
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[3.0, -2.0, 0.5, 40.0], 0.7);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softplus_matches_definition() {
        for x in [-30.0, -1.0, 0.0, 2.0, 50.0] {
            let direct = (1.0 + f64::exp(x)).ln();
            assert!((softplus(x) - direct).abs() < 1e-12);
        }
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_symmetry() {
        for x in [-5.0, -0.3, 0.0, 1.7, 40.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
    }
}
