use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::augment::Normalization;
use super::folds::DataSetting;
use crate::data::{ClassMap, SyntheticSpec};
use crate::error::{Error, Result};
use crate::groups::GroupKind;
use crate::layers::PoolMode;
use crate::unet::{ArchConfig, ModelSize};

/// Per-dataset batch size, learning rate and epoch budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetPreset {
    Kvasir,
    Nucleiseg,
    CocoStuff,
    Urde,
    Isaid,
    /// Desk-scale stand-in: Kvasir settings with 30 epochs.
    Synthetic,
}

impl DatasetPreset {
    /// `(batch_size, learning_rate, n_epochs)`
    pub fn hyperparameters(self) -> (usize, f64, usize) {
        match self {
            DatasetPreset::Kvasir => (8, 1e-4, 150),
            DatasetPreset::Nucleiseg => (16, 1e-4, 200),
            DatasetPreset::CocoStuff => (16, 1e-3, 200),
            DatasetPreset::Urde => (4, 5e-4, 500),
            DatasetPreset::Isaid => (16, 1e-4, 250),
            DatasetPreset::Synthetic => (8, 1e-4, 30),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::InvalidArgument(format!("unknown precision '{other}'"))),
        }
    }
}

/// How test-set metrics are pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    /// Metrics per image, then the mean over images.
    #[default]
    PerImage,
    /// One confusion table over all test pixels.
    Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub preset: Option<DatasetPreset>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub n_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data_setting: DataSetting,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_dice_eps")]
    pub dice_eps: f64,
    #[serde(default = "default_true")]
    pub augment: bool,
    /// Fixed colour statistics; fitted on the training split when absent.
    #[serde(default)]
    pub normalization: Option<Normalization>,
    #[serde(default)]
    pub averaging: Averaging,
    #[serde(default)]
    pub precision: Precision,
    /// Also keep the checkpoint with the best test IoU.
    #[serde(default = "default_true")]
    pub keep_best: bool,
}

fn default_weight_decay() -> f64 {
    0.01
}

fn default_dice_eps() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn preset(preset: DatasetPreset) -> Self {
        let (batch_size, learning_rate, n_epochs) = preset.hyperparameters();
        TrainConfig {
            preset: Some(preset),
            batch_size,
            learning_rate,
            n_epochs,
            seed: 0,
            data_setting: DataSetting::Large,
            weight_decay: default_weight_decay(),
            dice_eps: default_dice_eps(),
            augment: true,
            normalization: None,
            averaging: Averaging::PerImage,
            precision: Precision::F32,
            keep_best: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("train.{name} must be positive")))
            }
        };
        positive("batch_size", self.batch_size > 0)?;
        positive("n_epochs", self.n_epochs > 0)?;
        positive("learning_rate", self.learning_rate > 0.0 && self.learning_rate.is_finite())?;
        positive("dice_eps", self.dice_eps > 0.0)?;
        if self.weight_decay < 0.0 {
            return Err(Error::Config("train.weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(DatasetPreset::Synthetic)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: GroupKind,
    pub size: ModelSize,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub kernel_size: Option<usize>,
    #[serde(default = "default_hw")]
    pub input_hw: usize,
    #[serde(default)]
    pub pooling: PoolMode,
}

fn default_hw() -> usize {
    224
}

impl ModelSection {
    pub fn arch(&self, in_channels: usize, n_classes: usize) -> Result<ArchConfig> {
        let mut cfg = match self.lambda {
            Some(l) => ArchConfig::with_lambda(self.family, self.size, l)?,
            None => ArchConfig::preset(self.family, self.size),
        };
        if let Some(k) = self.kernel_size {
            cfg.kernel_size = k;
        }
        cfg.input_hw = self.input_hw;
        cfg.in_channels = in_channels;
        cfg.n_classes = n_classes;
        cfg.pooling = self.pooling;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Folder {
        manifest: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSource,
}

/// Parse a right-hand side as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Apply `a.b.c=value` to a TOML tree.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not KEY=VALUE")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key '{key}'")));
    }
    let (last, parents) = path.split_last().expect("non-empty");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{p}' in '{key}' is not a section")))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Fill absent `train` keys from `train.preset`.
fn expand_preset(root: &mut toml::Table) -> Result<()> {
    let Some(train) = root.get_mut("train").and_then(|t| t.as_table_mut()) else {
        return Ok(());
    };
    let preset = match train.get("preset") {
        None => DatasetPreset::Synthetic,
        Some(v) => v
            .clone()
            .try_into::<DatasetPreset>()
            .map_err(|e| Error::Config(format!("train.preset: {e}")))?,
    };
    let (b, lr, e) = preset.hyperparameters();
    train.entry("batch_size").or_insert(toml::Value::Integer(b as i64));
    train.entry("learning_rate").or_insert(toml::Value::Float(lr));
    train.entry("n_epochs").or_insert(toml::Value::Integer(e as i64));
    Ok(())
}

impl ExperimentConfig {
    /// Parse, apply overrides in order, expand the dataset preset and validate.
    /// Relative manifest paths resolve against `base`.
    pub fn from_toml(text: &str, overrides: &[String], base: &Path) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        expand_preset(&mut root)?;
        let mut cfg: ExperimentConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.train.validate()?;
        if let DataSource::Folder { manifest } = &mut cfg.data {
            if manifest.is_relative() {
                *manifest = base.join(&*manifest);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, overrides, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Class layout of a data source: `(in_channels, mask classes)`.
pub fn data_layout(source: &DataSource) -> Result<(usize, ClassMap)> {
    match source {
        DataSource::Synthetic(_) => Ok((3, ClassMap::Binary)),
        DataSource::Folder { manifest } => {
            let text = std::fs::read_to_string(manifest)?;
            let m = crate::data::DatasetManifest::from_toml(&text, manifest.parent().unwrap_or(Path::new(".")))?;
            Ok((3, m.classes))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[model]
family = "c4"
size = "small"
input_hw = 64

[train]
preset = "urde"

[data]
kind = "synthetic"
n_images = 20
image_size = 64
templates = ["l"]
cell = 8
orientation = { kind = "uniform" }
noise = 0.1
seed = 0
"#;

    #[test]
    fn preset_fills_table_values() {
        let cfg = ExperimentConfig::from_toml(BASE, &[], Path::new(".")).unwrap();
        assert_eq!((cfg.train.batch_size, cfg.train.learning_rate, cfg.train.n_epochs), (4, 5e-4, 500));
        assert_eq!(cfg.train.dice_eps, 1.0);
    }

    #[test]
    fn overrides_win_and_typos_fail() {
        let o = vec!["train.n_epochs=5".to_string(), "train.data_setting=small".to_string()];
        let cfg = ExperimentConfig::from_toml(BASE, &o, Path::new(".")).unwrap();
        assert_eq!(cfg.train.n_epochs, 5);
        assert_eq!(cfg.train.data_setting, DataSetting::Small);
        let bad = vec!["train.n_epoch=5".to_string()];
        assert!(matches!(ExperimentConfig::from_toml(BASE, &bad, Path::new(".")), Err(Error::Config(_))));
        let bad = vec!["model.famly=c8".to_string()];
        assert!(ExperimentConfig::from_toml(BASE, &bad, Path::new(".")).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::from_toml(BASE, &[], Path::new(".")).unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap(), &[], Path::new(".")).unwrap();
        assert_eq!(cfg, again);
    }
}
