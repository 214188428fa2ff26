use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasynth::SceneConfig;
use crate::error::{Error, Result};
use crate::network::{schedule_with_epochs, BinarizationSchedule, DEFAULT_ANCHORS};
use crate::train::KTConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub classes: usize,
    /// `(w, h)` anchor priors in units of the image side.
    pub anchors: Vec<[f64; 2]>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { classes: 3, anchors: DEFAULT_ANCHORS.iter().map(|&(w, h)| [w, h]).collect(), init_seed: 0 }
    }
}

impl ModelConfig {
    pub fn anchor_pairs(&self) -> Vec<(f64, f64)> {
        self.anchors.iter().map(|a| (a[0], a[1])).collect()
    }
}

/// Full-precision teacher training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, learning_rate: 1e-3, batch_size: 8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub m0_epochs: usize,
    pub m1_epochs: usize,
    pub m2_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { m0_epochs: 2, m1_epochs: 15, m2_epochs: 30 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<BinarizationSchedule> {
        let s = schedule_with_epochs([self.m0_epochs, self.m1_epochs, self.m2_epochs]);
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub kt: KTConfig,
    pub schedule: ScheduleConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if self.model.classes == 0 {
            return Err(Error::Config("model.classes must be at least 1".into()));
        }
        if self.model.anchors.is_empty() {
            return Err(Error::Config("model.anchors must not be empty".into()));
        }
        if let Some(a) =
            self.model.anchors.iter().find(|a| !(a[0] > 0.0 && a[1] > 0.0 && a[0].is_finite() && a[1].is_finite()))
        {
            return Err(Error::Config(format!("anchor {a:?} must have positive finite sides")));
        }
        if !(self.train.learning_rate >= 0.0 && self.train.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "train.learning_rate {} must be finite and non-negative",
                self.train.learning_rate
            )));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        self.kt.validate()?;
        self.schedule.build().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Teacher optimizer settings expressed as a detection-only [`KTConfig`].
    pub fn teacher_kt(&self) -> KTConfig {
        KTConfig {
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            seed: self.train.seed,
            ..self.kt.clone()
        }
    }

    /// Every field with its resolved value, in the same format [`RunConfig::parse`] reads.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
