use serde::{Deserialize, Serialize};

use crate::divergence::{by_name, TOTAL_VARIATION};
use crate::error::{Error, Result};
use crate::loss::{build_loss, SftLoss};

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Mle,
    /// Conjugate loss of the configured divergence.
    FSft,
    Dpo,
    /// SFT loss + λ·DPO loss with adaptive λ.
    MultiObjective,
    /// Alternating SFT / DPO segments.
    Interleaved,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mle" => Ok(Objective::Mle),
            "f_sft" => Ok(Objective::FSft),
            "dpo" => Ok(Objective::Dpo),
            "multi_objective" => Ok(Objective::MultiObjective),
            "interleaved" => Ok(Objective::Interleaved),
            other => Err(Error::config("train.objective", format!("unknown objective `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr · ½(1 + cos(π t / T))` over a run of `T` steps.
    Cosine,
}

impl LrSchedule {
    pub fn at(&self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                if total == 0 {
                    base
                } else {
                    let frac = step as f64 / total as f64;
                    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
                }
            }
        }
    }
}

/// Adaptive-λ parameters of the multi-objective trainer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LambdaConfig {
    pub lambda_init: f64,
    pub target_acc: f64,
    pub delta: f64,
    pub up_factor: f64,
    pub down_factor: f64,
    /// Steps between λ updates.
    pub eval_window: usize,
}

impl Default for LambdaConfig {
    fn default() -> Self {
        LambdaConfig {
            lambda_init: 0.1,
            target_acc: 0.85,
            delta: 0.01,
            up_factor: 2.0,
            down_factor: 0.5,
            eval_window: 10,
        }
    }
}

/// Full training configuration (the `[train]` config section).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    /// Divergence of the SFT part (`f_sft`, `multi_objective`, `interleaved`).
    pub divergence: String,
    pub learning_rate: f64,
    /// Learning rate of DPO stages; defaults to `learning_rate`.
    pub dpo_learning_rate: Option<f64>,
    pub lr_schedule: LrSchedule,
    pub beta: f64,
    pub steps: usize,
    /// 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub lambda: LambdaConfig,
    pub segments: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Differentiate the SFT losses with `V(s₀)` held constant.
    pub stop_grad_value: bool,
    /// Discount used for occupancy metrics when the MDP itself has `γ = 1`.
    pub metric_gamma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::FSft,
            divergence: TOTAL_VARIATION.name.to_string(),
            learning_rate: 0.1,
            dpo_learning_rate: None,
            lr_schedule: LrSchedule::Constant,
            beta: 0.01,
            steps: 100,
            batch_size: 0,
            seed: 0,
            lambda: LambdaConfig::default(),
            segments: 4,
            checkpoint_every: 10,
            log_every: 1,
            stop_grad_value: false,
            metric_gamma: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if let Some(lr) = self.dpo_learning_rate {
            if !(lr > 0.0) {
                return Err(Error::config("train.dpo_learning_rate", "must be positive"));
            }
        }
        if !(self.beta > 0.0) {
            return Err(Error::config("train.beta", "must be positive"));
        }
        if !(self.lambda.delta >= 0.0) {
            return Err(Error::config("train.lambda.delta", "must be non-negative"));
        }
        if !(self.lambda.lambda_init > 0.0 && self.lambda.up_factor > 0.0 && self.lambda.down_factor > 0.0) {
            return Err(Error::config("train.lambda", "lambda_init and factors must be positive"));
        }
        if self.lambda.eval_window == 0 {
            return Err(Error::config("train.lambda.eval_window", "must be at least 1"));
        }
        if self.segments == 0 {
            return Err(Error::config("train.segments", "must be at least 1"));
        }
        if self.log_every == 0 {
            return Err(Error::config("train.log_every", "must be at least 1"));
        }
        if !(self.metric_gamma > 0.0 && self.metric_gamma < 1.0) {
            return Err(Error::config("train.metric_gamma", "must lie in (0, 1)"));
        }
        by_name(&self.divergence)?;
        Ok(())
    }

    /// The SFT loss implied by `objective` and `divergence`.
    pub fn sft_loss(&self) -> Result<SftLoss> {
        Ok(match self.objective {
            Objective::Mle => SftLoss::Mle,
            _ => SftLoss::Divergence(
                build_loss(by_name(&self.divergence)?, self.beta).with_stop_grad(self.stop_grad_value),
            ),
        })
    }

    pub fn dpo_lr(&self) -> f64 {
        self.dpo_learning_rate.unwrap_or(self.learning_rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_from_toml() {
        let cfg: TrainConfig = toml::from_str(
            r#"
            objective = "interleaved"
            learning_rate = 0.5
            lr_schedule = "cosine"
            [lambda]
            target_acc = 0.9
            "#,
        )
        .unwrap();
        assert_eq!(cfg.objective, Objective::Interleaved);
        assert_eq!(cfg.lambda.target_acc, 0.9);
        assert_eq!(cfg.lambda.eval_window, 10);
        assert_eq!(cfg.beta, 0.01);
        assert_eq!(cfg.segments, 4);
        cfg.validate().unwrap();
    }

    #[test]
    fn validation_names_the_field() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "train.learning_rate"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(LrSchedule::Cosine.at(2.0, 0, 10), 2.0);
        assert!(LrSchedule::Cosine.at(2.0, 10, 10).abs() < 1e-15);
        assert!((LrSchedule::Cosine.at(2.0, 5, 10) - 1.0).abs() < 1e-15);
    }
}
