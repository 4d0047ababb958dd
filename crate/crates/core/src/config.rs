//! Run configuration: one JSON document that, together with a dataset pack,
//! fixes everything a CLI run does.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GeneratorConfig;
use crate::error::{Error, Result};
use crate::hierarchy::{ModelConfig, TrainConfig, TrainTarget};
use crate::metrics::ReportFormat;
use crate::optim::AdamHyper;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamHyper,
    pub freeze_fx: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_at_train_accuracy: Option<f64>,
}

impl TrainSettings {
    pub fn for_target(&self, target: TrainTarget, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            adam: self.adam,
            seed,
            freeze_fx: self.freeze_fx,
            target,
            stop_at_train_accuracy: self.stop_at_train_accuracy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSettings {
    pub gamma: u32,
    pub format: ReportFormat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub metrics: MetricsSettings,
    /// Train/validation split in parts, e.g. `[3, 1]`.
    pub split: (usize, usize),
    pub output_dir: String,
    /// Seeds model initialization, shuffling, dropout and the split.
    pub seed: u64,
}

impl RunConfig {
    /// Small grayscale setup that trains in minutes on one core.
    pub fn desk() -> Self {
        let dataset = GeneratorConfig { n_classes: 4, per_score: 16, image_size: 32, channels: 1, augment: 0, seed: 7 };
        RunConfig {
            model: ModelConfig::desk(dataset.n_classes, dataset.channels),
            dataset,
            train: TrainSettings {
                batch_size: 16,
                epochs: 30,
                adam: AdamHyper::default(),
                freeze_fx: false,
                stop_at_train_accuracy: None,
            },
            metrics: MetricsSettings { gamma: 1, format: ReportFormat::Json },
            split: (3, 1),
            output_dir: "runs/desk".into(),
            seed: 1,
        }
    }

    /// Full-size layout: 23 classes at 224×224 RGB, batch 128.
    pub fn full() -> Self {
        let dataset = GeneratorConfig::full();
        RunConfig {
            model: ModelConfig::full(dataset.n_classes),
            dataset,
            train: TrainSettings {
                batch_size: 128,
                epochs: 50,
                adam: AdamHyper::default(),
                freeze_fx: false,
                stop_at_train_accuracy: None,
            },
            metrics: MetricsSettings { gamma: 1, format: ReportFormat::Json },
            split: (3, 1),
            output_dir: "runs/full".into(),
            seed: 1,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(RunConfig::desk()),
            "full" => Ok(RunConfig::full()),
            other => Err(Error::UnknownKind(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.for_target(TrainTarget::Higher, self.seed).validate()?;
        let d = &self.dataset;
        if self.model.n_classes() != d.n_classes {
            return Err(Error::InvalidConfig(format!(
                "model has {} classes, dataset {}",
                self.model.n_classes(),
                d.n_classes
            )));
        }
        if self.model.tiling.image_size != d.image_size || self.model.higher.backbone.in_channels != d.channels {
            return Err(Error::InvalidConfig("model input does not match the dataset image size or channels".into()));
        }
        if self.split.0 == 0 || self.split.1 == 0 {
            return Err(Error::InvalidConfig("split parts must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("run config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for c in [RunConfig::desk(), RunConfig::full()] {
            c.validate().unwrap();
            assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
        }
    }

    #[test]
    fn full_preset_settings() {
        let c = RunConfig::full();
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.train.adam, AdamHyper { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 });
        assert_eq!((c.model.tiling.window, c.model.tiling.stride), (64, 32));
        assert_eq!((c.dataset.n_classes, c.dataset.per_score, c.dataset.augment), (23, 20, 10));
        assert_eq!(c.metrics.gamma, 1);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::desk().to_json().unwrap()).unwrap();
        v["train"]["momentum"] = serde_json::json!(0.5);
        assert!(matches!(RunConfig::from_json(&v.to_string()), Err(Error::InvalidConfig(_))));
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::desk().to_json().unwrap()).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(RunConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn mismatched_classes_rejected() {
        let mut c = RunConfig::desk();
        c.dataset.n_classes = 5;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
    }
}
