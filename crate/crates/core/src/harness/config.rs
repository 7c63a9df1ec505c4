use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::MdpFile;
use crate::policy::{PolicyKind, PolicyModel, PolicyTable, DEFAULT_HIDDEN};
use crate::mdp::StateTree;
use crate::soft_rl::ValueForm;
use crate::train::TrainConfig;

/// Reference policy of the expert solve and of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSpec {
    Uniform,
    /// Softmax of logits drawn uniformly from `[−scale, scale]`.
    Random { scale: f64, seed: u64 },
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        ReferenceSpec::Uniform
    }
}

impl ReferenceSpec {
    pub fn build(&self, tree: &StateTree) -> PolicyTable {
        match *self {
            ReferenceSpec::Uniform => PolicyTable::uniform(tree),
            ReferenceSpec::Random { scale, seed } => PolicyTable::random(tree, scale, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    pub beta: f64,
    pub reference: ReferenceSpec,
    pub form: ValueForm,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            beta: 1.0,
            reference: ReferenceSpec::Uniform,
            form: ValueForm::ReferenceWeighted,
        }
    }
}

/// Dataset sizes. Seeds left out are derived from the top-level seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_demos: usize,
    pub n_pairs: usize,
    pub n_eval_pairs: usize,
    /// Exact expert distribution instead of samples (`n_demos` ignored).
    pub exhaustive: bool,
    pub demo_seed: Option<u64>,
    pub pair_seed: Option<u64>,
    pub eval_seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_demos: 200,
            n_pairs: 100,
            n_eval_pairs: 50,
            exhaustive: false,
            demo_seed: None,
            pair_seed: None,
            eval_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: PolicyKind,
    pub hidden: usize,
    /// 0 starts tabular models at the reference logits.
    pub init_scale: f64,
    pub init_seed: Option<u64>,
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: PolicyKind::Tabular,
            hidden: DEFAULT_HIDDEN,
            init_scale: 0.0,
            init_seed: None,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub n_states: usize,
    pub state_seed: Option<u64>,
    /// Probe-time β; defaults to the training β.
    pub beta: Option<f64>,
    /// Use every k-th checkpoint (the last one is always kept).
    pub every: usize,
    pub form: ValueForm,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            n_states: 20,
            state_seed: None,
            beta: None,
            every: 1,
            form: ValueForm::ReferenceWeighted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("runs/default") }
    }
}

/// Parameter grid of the `sweep` command; the cartesian product is run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub seeds: Vec<u64>,
    pub learning_rates: Vec<f64>,
    pub objectives: Vec<String>,
    pub divergences: Vec<String>,
}

/// A whole experiment: one file, one section per module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mdp: MdpFile,
    #[serde(default)]
    pub expert: ExpertConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    /// Run the acceptance suite after `report`.
    #[serde(default)]
    pub acceptance: bool,
}

/// `[mdp]` may name a separate file with `path = "..."`.
#[derive(Deserialize)]
struct RawConfig {
    mdp: Option<toml::Value>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| parse_error("config", e))?;
        let cfg: ExperimentConfig = match raw.mdp {
            None => return Err(Error::config("mdp", "missing section")),
            Some(toml::Value::Table(t)) if t.contains_key("path") => {
                if t.len() != 1 {
                    return Err(Error::config("mdp.path", "a file reference cannot be mixed with inline fields"));
                }
                let rel = t["path"]
                    .as_str()
                    .ok_or_else(|| Error::config("mdp.path", "must be a string"))?;
                let path = base_dir.join(rel);
                let mdp_text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
                let context = path.display().to_string();
                let mdp: MdpFile = toml::from_str(&mdp_text).map_err(|e| parse_error(&context, e))?;
                let mut doc: toml::Table = text.parse().map_err(|e| parse_error("config", e))?;
                doc.insert(
                    "mdp".into(),
                    toml::Value::try_from(&mdp).map_err(|e| parse_error(&context, e))?,
                );
                toml::Value::Table(doc)
                    .try_into()
                    .map_err(|e: toml::de::Error| parse_error("config", e))?
            }
            Some(_) => toml::from_str(text).map_err(|e| parse_error("config", e))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.expert.beta > 0.0) {
            return Err(Error::config("expert.beta", "must be positive"));
        }
        if self.probe.every == 0 {
            return Err(Error::config("probe.every", "must be at least 1"));
        }
        if !(self.model.temperature > 0.0) {
            return Err(Error::config("model.temperature", "must be positive"));
        }
        if self.model.kind == PolicyKind::Featurized && self.model.hidden == 0 {
            return Err(Error::config("model.hidden", "must be at least 1"));
        }
        self.train.validate()
    }

    /// Overwrite the master seed and the training seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn demo_seed(&self) -> u64 {
        self.data.demo_seed.unwrap_or(self.seed.wrapping_add(1))
    }

    pub fn pair_seed(&self) -> u64 {
        self.data.pair_seed.unwrap_or(self.seed.wrapping_add(2))
    }

    pub fn eval_seed(&self) -> u64 {
        self.data.eval_seed.unwrap_or(self.seed.wrapping_add(3))
    }

    pub fn init_seed(&self) -> u64 {
        self.model.init_seed.unwrap_or(self.seed.wrapping_add(4))
    }

    pub fn state_seed(&self) -> u64 {
        self.probe.state_seed.unwrap_or(self.seed.wrapping_add(5))
    }

    pub fn probe_beta(&self) -> f64 {
        self.probe.beta.unwrap_or(self.train.beta)
    }

    /// Initial model of a training run.
    pub fn initial_model(&self, tree: &StateTree, reference: &PolicyTable) -> PolicyModel {
        let m = match self.model.kind {
            PolicyKind::Tabular if self.model.init_scale == 0.0 => {
                let logits = reference.probs().iter().map(|p| p.ln()).collect();
                PolicyModel::tabular_from_logits(tree, logits).expect("reference matches tree")
            }
            PolicyKind::Tabular => PolicyModel::random_tabular(tree, self.model.init_scale, self.init_seed()),
            PolicyKind::Featurized => {
                let scale = if self.model.init_scale == 0.0 { 0.1 } else { self.model.init_scale };
                PolicyModel::featurized(tree, self.model.hidden, scale, self.init_seed())
            }
        };
        m.with_temperature(self.model.temperature)
    }

    /// Canonical serialization used for the manifest hash.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

pub(crate) fn parse_error(context: &str, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        context: context.to_string(),
        message: e.to_string().trim_end().to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
[mdp]
vocab_size = 2
horizon = 2
prompts = [[0]]
[mdp.reward]
kind = "uniform"
seed = 1
low = -1.0
high = 1.0
"#;

    #[test]
    fn minimal_config_loads() {
        let cfg = ExperimentConfig::from_toml(MINIMAL, Path::new(".")).unwrap();
        assert_eq!(cfg.mdp.vocab_size, 2);
        assert_eq!(cfg.demo_seed(), 4);
        assert_eq!(cfg.mdp.build().unwrap().tree().len(), 7);
    }

    #[test]
    fn missing_reward_names_the_field() {
        let text = MINIMAL.split("[mdp.reward]").next().unwrap();
        let err = ExperimentConfig::from_toml(text, Path::new(".")).unwrap_err().to_string();
        assert!(err.contains("reward"), "{err}");
    }

    #[test]
    fn unknown_field_is_rejected() {
        let text = format!("{MINIMAL}\n[train]\nlearning_rat = 1.0\n");
        let err = ExperimentConfig::from_toml(&text, Path::new(".")).unwrap_err().to_string();
        assert!(err.contains("learning_rat"), "{err}");
    }
}
