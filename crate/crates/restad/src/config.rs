//! TOML run and ablation configuration.

use std::path::PathBuf;

use restad_core::data::SynthSpec;
use restad_core::init::GammaInitMode;
use restad_core::metrics::DEFAULT_MAX_BUFFER;
use restad_core::model::ModelConfig;
use restad_core::score::Criterion;
use restad_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Directory with `train.csv`, `test.csv`, `test_labels.csv`.
    CsvDir(PathBuf),
    Synth(SynthSpec),
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Synth(SynthSpec::default())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Centers drawn at random, no base-model phase.
    Random,
    /// Base model first, then centers and width from K-means on its latents.
    #[default]
    Kmeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the model, training and synthetic-data seeds when set.
    pub seed: Option<u64>,
    pub init: InitMode,
    pub gamma_mode: GammaInitMode,
    pub criterion: Criterion,
    pub anomaly_ratio: f64,
    pub max_buffer: usize,
    pub out_dir: PathBuf,
    pub data: DataSource,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            init: InitMode::default(),
            gamma_mode: GammaInitMode::Reciprocal,
            criterion: Criterion::RTimesS,
            anomaly_ratio: 0.01,
            max_buffer: DEFAULT_MAX_BUFFER,
            out_dir: PathBuf::from("out"),
            data: DataSource::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Pushes `seed` down into the sub-configs.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self.model.seed = seed;
        self.train.seed = seed;
        if let DataSource::Synth(spec) = &mut self.data {
            spec.seed = seed;
        }
        self
    }

    /// Applies the seed override and validates everything but `input_dim`,
    /// which is taken from the data at load time.
    pub fn resolved(self) -> Result<Self> {
        let cfg = match self.seed {
            Some(s) => self.with_seed(s),
            None => self,
        };
        if !(cfg.anomaly_ratio > 0.0 && cfg.anomaly_ratio < 1.0) {
            return Err(Error::Usage(format!(
                "anomaly_ratio {} outside (0, 1)",
                cfg.anomaly_ratio
            )));
        }
        cfg.train.validate()?;
        cfg.model.validate()?;
        if let DataSource::Synth(spec) = &cfg.data {
            spec.validate()?;
        }
        if cfg.init == InitMode::Kmeans && !cfg.model.rbf_enabled {
            return Err(Error::Usage(
                "--init kmeans needs rbf_enabled = true".into(),
            ));
        }
        if cfg.criterion.needs_similarity() && !cfg.model.rbf_enabled {
            return Err(Error::Usage(format!(
                "criterion {} needs rbf_enabled = true",
                cfg.criterion
            )));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Usage(format!("cannot render config: {e}")))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Usage(format!("config: {}", e.message())))
    }
}

/// A value on the criterion axis; `transformer` is the model without an RBF
/// layer, scored by reconstruction error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionValue {
    Transformer,
    ROnly,
    SOnly,
    RPlusS,
    RTimesS,
}

impl CriterionValue {
    pub fn criterion(self) -> Option<Criterion> {
        match self {
            Self::Transformer => None,
            Self::ROnly => Some(Criterion::ROnly),
            Self::SOnly => Some(Criterion::SOnly),
            Self::RPlusS => Some(Criterion::RPlusS),
            Self::RTimesS => Some(Criterion::RTimesS),
        }
    }

    pub fn name(self) -> &'static str {
        self.criterion().map_or("transformer", Criterion::name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    tag = "axis",
    content = "values",
    rename_all = "snake_case",
    deny_unknown_fields
)]
pub enum Sweep {
    Criterion(Vec<CriterionValue>),
    RbfPosition(Vec<usize>),
    NCenters(Vec<usize>),
}

impl Sweep {
    pub fn axis(&self) -> &'static str {
        match self {
            Self::Criterion(_) => "criterion",
            Self::RbfPosition(_) => "rbf_position",
            Self::NCenters(_) => "n_centers",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Criterion(v) => v.len(),
            Self::RbfPosition(v) | Self::NCenters(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Vec<String> {
        match self {
            Self::Criterion(v) => v.iter().map(|c| c.name().to_string()).collect(),
            Self::RbfPosition(v) | Self::NCenters(v) => v.iter().map(|x| x.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    #[serde(default = "one")]
    pub repeats: usize,
    pub sweep: Sweep,
    #[serde(default)]
    pub run: RunConfig,
}

fn one() -> usize {
    1
}

impl AblationGrid {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Usage("repeats must be positive".into()));
        }
        if self.sweep.is_empty() {
            return Err(Error::Usage("sweep has no values".into()));
        }
        let m = &self.run.model;
        let bad = match &self.sweep {
            Sweep::RbfPosition(v) => v
                .iter()
                .find(|&&p| p == 0 || p > m.n_layers)
                .map(|p| format!("rbf_position {p} outside 1..={}", m.n_layers)),
            Sweep::NCenters(v) => v
                .iter()
                .find(|&&n| n == 0)
                .map(|_| "n_centers must be positive".into()),
            Sweep::Criterion(_) => None,
        };
        match bad {
            Some(msg) => Err(Error::Usage(msg)),
            None => Ok(()),
        }
    }
}
