use std::ops::Range;

use super::config::LambdaConfig;

/// Adaptive multiplier of the DPO term: after each evaluation window,
/// `λ ← λ·down` when `acc − target < δ`, otherwise `λ ← λ·up`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaController {
    pub lambda: f64,
    pub target_acc: f64,
    pub delta: f64,
    pub up_factor: f64,
    pub down_factor: f64,
}

impl LambdaController {
    pub fn new(cfg: &LambdaConfig) -> Self {
        LambdaController {
            lambda: cfg.lambda_init,
            target_acc: cfg.target_acc,
            delta: cfg.delta,
            up_factor: cfg.up_factor,
            down_factor: cfg.down_factor,
        }
    }

    /// Update from one window's pair accuracy and return the new λ.
    pub fn update(&mut self, accuracy: f64) -> f64 {
        if accuracy - self.target_acc < self.delta {
            self.lambda *= self.down_factor;
        } else {
            self.lambda *= self.up_factor;
        }
        self.lambda
    }

    /// λ trace for a scripted accuracy sequence (initial value first).
    pub fn replay(mut self, accuracies: &[f64]) -> Vec<f64> {
        let mut trace = vec![self.lambda];
        trace.extend(accuracies.iter().map(|&a| self.update(a)));
        trace
    }
}

/// Split `0..n` into `k` contiguous ranges whose sizes differ by at most one
/// (earlier ranges take the remainder).
pub fn partition(n: usize, k: usize) -> Vec<Range<usize>> {
    assert!(k > 0);
    let base = n / k;
    let extra = n % k;
    let mut start = 0;
    (0..k)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn controller() -> LambdaController {
        LambdaController::new(&LambdaConfig {
            lambda_init: 0.1,
            target_acc: 0.85,
            delta: 0.01,
            ..LambdaConfig::default()
        })
    }

    #[test]
    fn doubles_above_threshold() {
        let mut c = controller();
        assert_eq!(c.update(0.90), 0.2);
    }

    #[test]
    fn halves_below_threshold() {
        let mut c = controller();
        assert_eq!(c.update(0.855), 0.05);
    }

    #[test]
    fn three_halvings() {
        let trace = controller().replay(&[0.1, 0.2, 0.3]);
        assert_eq!(trace.last().copied(), Some(0.0125));
    }

    #[test]
    fn partition_is_a_disjoint_cover() {
        for (n, k) in [(10, 4), (3, 4), (0, 2), (17, 1)] {
            let parts = partition(n, k);
            assert_eq!(parts.len(), k);
            let mut next = 0;
            for p in &parts {
                assert_eq!(p.start, next);
                next = p.end;
            }
            assert_eq!(next, n);
        }
    }
}
