//! Experiment configuration, read from TOML.
//!
//! Every field has a default, so an empty file is a valid configuration.
//! Individual values can be overridden with dotted `key=value` assignments
//! (see [`ExperimentConfig::apply_override`]).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use maskstrike::attack::{AttackConfig, Variant};
use maskstrike::detector::TrainConfig;
use maskstrike::scenedata::DatasetConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Detector weights; defaults to `<output_dir>/detector.mskw`.
    pub weights: Option<PathBuf>,
    /// Worker threads for the attack stage; 0 picks the number of cores.
    pub workers: usize,
    pub data: DataConfig,
    pub training: TrainingConfig,
    pub attack: AttackSettings,
    pub eval: EvalConfig,
    pub report: ReportConfig,
}

/// Evaluation scenes: read from `path` when set, generated otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub scenes: DatasetConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub scenes: DatasetConfig,
    pub optimizer: TrainConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantOverride {
    pub learning_rate: Option<f64>,
    pub max_iter: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSettings {
    pub variants: Vec<Variant>,
    pub learning_rate: f64,
    /// Overrides every variant's default budget when set.
    pub max_iter: Option<usize>,
    pub overrides: BTreeMap<Variant, VariantOverride>,
    /// Random target classes per image for the targeted variants.
    pub targets_per_image: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub permutation: bool,
    pub resize_scales: Vec<f64>,
    /// Write adversarial and perturbation PNGs for every attack.
    pub save_images: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Triptychs rendered per variant.
    pub triptychs: usize,
    /// Bin width of the mean-probability histogram.
    pub prob_bin: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("maskstrike-out"),
            weights: None,
            workers: 0,
            data: DataConfig::default(),
            training: TrainingConfig::default(),
            attack: AttackSettings::default(),
            eval: EvalConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            scenes: DatasetConfig {
                n_scenes: 100,
                seed: 1,
                ..DatasetConfig::default()
            },
        }
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            scenes: DatasetConfig::default(),
            optimizer: TrainConfig::default(),
        }
    }
}

impl Default for AttackSettings {
    fn default() -> Self {
        AttackSettings {
            variants: Variant::ALL.to_vec(),
            learning_rate: maskstrike::attack::DEFAULT_LEARNING_RATE,
            max_iter: None,
            overrides: BTreeMap::new(),
            targets_per_image: 10,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            permutation: true,
            resize_scales: vec![0.6, 0.8, 1.2, 1.4],
            save_images: false,
        }
    }
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            triptychs: 4,
            prob_bin: 0.05,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Sets a dotted key such as `attack.learning_rate=4000` or
    /// `data.scenes.n_scenes=20`. The value is parsed as a TOML value and
    /// falls back to a plain string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let Some((key, raw)) = assignment.split_once('=') else {
            bail!("override {assignment:?} is not of the form key=value");
        };
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
        let mut root = toml::Value::try_from(&*self)?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .with_context(|| format!("{key:?}: {part:?} is not inside a table"))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        *self = root.try_into().with_context(|| format!("applying override {assignment:?}"))?;
        Ok(())
    }

    pub fn weights_path(&self) -> PathBuf {
        self.weights.clone().unwrap_or_else(|| self.output_dir.join("detector.mskw"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.attack.variants.is_empty() {
            bail!("attack.variants is empty");
        }
        for v in &self.attack.variants {
            self.attack_config(*v).validate()?;
        }
        if self.attack.variants.iter().any(|v| v.is_targeted()) && self.attack.targets_per_image == 0 {
            bail!("attack.targets_per_image must be positive for targeted variants");
        }
        if let Some(s) = self.eval.resize_scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            bail!("resize scale {s} must be positive");
        }
        if !(self.report.prob_bin > 0.0 && self.report.prob_bin <= 1.0) {
            bail!("report.prob_bin must lie in (0, 1]");
        }
        if self.data.path.is_none() {
            self.data.scenes.validate()?;
        }
        Ok(())
    }

    /// Attack settings for `variant`; the target class and seed are filled
    /// in per attack.
    pub fn attack_config(&self, variant: Variant) -> AttackConfig {
        let o = self.attack.overrides.get(&variant).cloned().unwrap_or_default();
        AttackConfig {
            variant,
            learning_rate: o.learning_rate.unwrap_or(self.attack.learning_rate),
            max_iter: o
                .max_iter
                .or(self.attack.max_iter)
                .unwrap_or_else(|| variant.default_max_iter()),
            target_class: variant.is_targeted().then_some(0),
            seed: 0,
        }
    }
}
