//! Experiment configuration: TOML text with built-in presets.
//!
//! Resolution order, lowest to highest: built-in defaults, preset, config
//! file, explicit overrides applied by the caller.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{LabelTask, ModalityLayout};
use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

pub const PRESETS: &[(&str, &str)] = &[
    ("deap_pretrain", include_str!("../../presets/deap_pretrain.toml")),
    ("deap_finetune", include_str!("../../presets/deap_finetune.toml")),
    ("mahnob_pretrain", include_str!("../../presets/mahnob_pretrain.toml")),
    ("mahnob_finetune", include_str!("../../presets/mahnob_finetune.toml")),
    ("desk_pretrain", include_str!("../../presets/desk_pretrain.toml")),
    ("desk_finetune", include_str!("../../presets/desk_finetune.toml")),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub stage: Stage,
    pub epochs: usize,
    /// Fine-tune minibatch size. Informational for pre-training, where a
    /// batch is always `2PQ` samples.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub p: usize,
    pub q: usize,
    pub seed: u64,
    pub task: LabelTask,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Overrides the layout stored in the container.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layout: Option<ModalityLayout>,
    pub multiplier: f64,
    pub freeze_encoder: bool,
    /// Save a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    pub repeats: usize,
    /// Seed of the clip split applied when the dataset carries none.
    pub split_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            stage: Stage::Pretrain,
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            temperature: 0.1,
            p: 4,
            q: 2,
            seed: 0,
            task: LabelTask::FourClass,
            data: None,
            layout: None,
            multiplier: 0.125,
            freeze_encoder: false,
            checkpoint_every: 0,
            repeats: 5,
            split_seed: 0,
        }
    }
}

fn preset_table(name: &str) -> Result<toml::Table> {
    let text = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("unknown preset {name:?}; available: {}", names.join(", ")))
        })?;
    text.parse::<toml::Table>()
        .map_err(|e| Error::Config(format!("preset {name}: {e}")))
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        Self::resolve(Some(name), None)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::resolve(None, Some(text))
    }

    /// Defaults, then the preset's keys, then the file's keys.
    pub fn resolve(preset: Option<&str>, file_text: Option<&str>) -> Result<Self> {
        let mut table = toml::Table::new();
        if let Some(name) = preset {
            table.extend(preset_table(name)?);
        }
        if let Some(text) = file_text {
            let file: toml::Table = text
                .parse()
                .map_err(|e| Error::Config(format!("config file: {e}")))?;
            table.extend(file);
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            ));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.p < 2 {
            return bad(format!("P must be at least 2, got {}", self.p));
        }
        if self.q < 1 {
            return bad("Q must be at least 1".into());
        }
        if !(self.multiplier.is_finite() && self.multiplier > 0.0) {
            return bad(format!("multiplier must be positive, got {}", self.multiplier));
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if let Some(layout) = &self.layout {
            layout.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_recipes() {
        let d = ExperimentConfig::preset("deap_pretrain").unwrap();
        assert_eq!((d.epochs, d.p, d.q, d.learning_rate, d.temperature), (4000, 8, 2, 1e-4, 0.1));
        let m = ExperimentConfig::preset("mahnob_pretrain").unwrap();
        assert_eq!((m.epochs, m.p, m.q, m.learning_rate), (475, 4, 8, 1e-4));
        let df = ExperimentConfig::preset("deap_finetune").unwrap();
        assert_eq!((df.stage, df.epochs, df.batch_size, df.learning_rate), (Stage::Finetune, 20, 2048, 1e-3));
        let mf = ExperimentConfig::preset("mahnob_finetune").unwrap();
        assert_eq!((mf.epochs, mf.batch_size), (20, 256));
        for (name, _) in PRESETS {
            ExperimentConfig::preset(name).unwrap();
        }
        assert!(ExperimentConfig::preset("nope").is_err());
    }

    #[test]
    fn file_overrides_preset_overrides_default() {
        let c = ExperimentConfig::resolve(Some("deap_pretrain"), Some("epochs = 3\nseed = 9")).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.seed, 9);
        assert_eq!(c.p, 8);
        assert_eq!(c.split_seed, ExperimentConfig::default().split_seed);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = ExperimentConfig::preset("desk_finetune").unwrap();
        c.data = Some("some/dir".into());
        c.task = LabelTask::Arousal;
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ExperimentConfig::from_toml_str("epochs = 0").is_err());
        assert!(ExperimentConfig::from_toml_str("p = 1").is_err());
        assert!(ExperimentConfig::from_toml_str("temperature = -1.0").is_err());
        assert!(ExperimentConfig::from_toml_str("version = 2").is_err());
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml_str("epochs = ").is_err());
    }
}
