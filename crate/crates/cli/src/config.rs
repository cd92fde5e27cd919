use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use hrlf_core::{Metric, ModelConfig, SyntheticConfig, TestingCondition, TrainConfig};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "HRLF_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Replaces every seed below when set. `HRLF_SEED` wins over this.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Output root; `--out` wins over this.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out: None,
            data: DataSection::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directory, relative to the output root.
    pub path: PathBuf,
    pub synthetic: SyntheticConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { path: "data".into(), synthetic: SyntheticConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub teacher: TrainConfig,
    pub student: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { teacher: TrainConfig::default(), student: TrainConfig { epochs: 60, ..TrainConfig::default() } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: String,
    pub metric: Metric,
    /// Retained modalities during the ratio sweep.
    pub sweep_condition: TestingCondition,
    pub sweep_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { split: "test".into(), metric: Metric::F1Binary, sweep_condition: TestingCondition::LAV, sweep_seed: 0 }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Self::default(),
        };
        if let Ok(raw) = std::env::var(SEED_ENV) {
            let seed = raw.trim().parse().with_context(|| format!("{SEED_ENV}={raw:?} is not an unsigned integer"))?;
            config.seed = Some(seed);
        }
        if let Some(seed) = config.seed {
            config.apply_seed(seed);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.data.synthetic.seed = seed;
        self.train.teacher.seed = seed;
        self.train.student.seed = seed;
        self.eval.sweep_seed = seed;
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.data.synthetic.validate().context("[data.synthetic]")?;
        self.model.encoder.validate().context("[model.encoder]")?;
        self.train.teacher.validate().context("[train.teacher]")?;
        self.train.student.validate().context("[train.student]")?;
        if self.eval.split.is_empty() {
            bail!("[eval] split must be named");
        }
        if self.data.path.is_absolute() {
            bail!("[data] path must be relative to the output root");
        }
        Ok(())
    }
}
