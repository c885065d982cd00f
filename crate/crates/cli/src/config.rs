//! Experiment configuration: a strict TOML schema.

use std::fmt;
use std::path::{Path, PathBuf};

use cbamnet::backbone::{preset, ModelSpec, PlacementSet, PRESET_NAMES};
use cbamnet::data::synth::SyntheticSpec;
use cbamnet::data::SplitFractions;
use cbamnet::losses::FocalParams;
use cbamnet::train::{EpochBudget, TrainingPlan};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

/// A configuration problem tied to the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl fmt::Display) -> Self {
        ConfigError {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub split: SplitFractions,
    pub model: ModelConfig,
    pub training: TrainingPlan,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

/// Exactly one of the two sources must be given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub synthetic: Option<SyntheticSpec>,
    pub manifest: Option<ManifestSource>,
}

/// ChestXray14-style CSV plus an image directory. Relative paths are
/// resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSource {
    pub path: PathBuf,
    pub image_root: PathBuf,
    /// Label order; defaults to the 14 canonical pathologies.
    #[serde(default)]
    pub classes: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy)]
pub enum DatasetSource<'a> {
    Synthetic(&'a SyntheticSpec),
    Manifest(&'a ManifestSource),
}

impl DatasetConfig {
    pub fn source(&self) -> Result<DatasetSource<'_>, ConfigError> {
        match (&self.synthetic, &self.manifest) {
            (Some(s), None) => Ok(DatasetSource::Synthetic(s)),
            (None, Some(m)) => Ok(DatasetSource::Manifest(m)),
            _ => Err(ConfigError::new("dataset", "set exactly one of [dataset.synthetic] and [dataset.manifest]")),
        }
    }
}

/// Either a named preset or a full spec, with an optional placement
/// override.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: Option<String>,
    pub spec: Option<ModelSpec>,
    pub placement: Option<PlacementSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub batch_size: usize,
    /// Evaluate the validation split after every epoch.
    pub validate_each_epoch: bool,
    pub roc_svg: bool,
    /// Test samples whose attention maps `report` renders.
    pub attention_samples: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            batch_size: 64,
            validate_each_epoch: true,
            roc_svg: true,
            attention_samples: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub placements: Option<Vec<PlacementSet>>,
    pub strategy: Option<StrategyConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub epochs: EpochBudget,
    #[serde(default = "default_focal")]
    pub focal: FocalParams,
}

fn default_focal() -> FocalParams {
    FocalParams::default()
}

/// A parsed config with its source bytes and directory.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub digest: String,
    pub source: String,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let source = std::fs::read_to_string(path).map_err(|e| ConfigError::new("", format!("{}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&source, base_dir)
    }

    pub fn parse(source: &str, base_dir: PathBuf) -> Result<Self, ConfigError> {
        let config = parse_config(source)?;
        Ok(LoadedConfig {
            digest: hex(&Sha256::digest(source.as_bytes())),
            config,
            source: source.to_string(),
            base_dir,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Digest of the source bytes combined with the effective seed.
    pub fn run_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.source.as_bytes());
        h.update(self.config.seed.to_le_bytes());
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Deserializes with field paths attached to type and unknown-key errors.
pub fn parse_config(source: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = toml::Deserializer::new(source);
    let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { String::new() } else { path };
        ConfigError::new(path, e.into_inner().message().trim())
    })?;
    if config.schema_version != SCHEMA_VERSION {
        return Err(ConfigError::new(
            "schema_version",
            format!("unsupported version {}, expected {SCHEMA_VERSION}", config.schema_version),
        ));
    }
    Ok(config)
}

impl ExperimentConfig {
    pub fn class_names(&self) -> Vec<String> {
        match self.dataset.source() {
            Ok(DatasetSource::Synthetic(spec)) => spec.class_names().iter().map(|s| s.to_string()).collect(),
            Ok(DatasetSource::Manifest(ManifestSource { classes: Some(c), .. })) => c.clone(),
            _ => cbamnet::data::CANONICAL_CLASSES.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Model spec with the placement override applied. Presets take their
    /// head width from the dataset.
    pub fn model_spec(&self) -> Result<ModelSpec, ConfigError> {
        let m = &self.model;
        let mut spec = match (&m.preset, &m.spec) {
            (Some(name), None) => {
                let mut s = preset(name).map_err(|_| {
                    ConfigError::new("model.preset", format!("unknown preset {name:?}; expected one of {}", PRESET_NAMES.join(", ")))
                })?;
                s.num_labels = self.class_names().len();
                s
            }
            (None, Some(spec)) => spec.clone(),
            _ => return Err(ConfigError::new("model", "set exactly one of `preset` and `spec`")),
        };
        if let Some(p) = &m.placement {
            spec.placement = p.clone();
        }
        Ok(spec)
    }

    /// Semantic checks beyond the schema, each naming its field.
    pub fn validate(&self, loaded: &LoadedConfig) -> Result<ModelSpec, ConfigError> {
        let classes = self.class_names();
        match self.dataset.source()? {
            DatasetSource::Synthetic(spec) => spec.validate().map_err(|e| ConfigError::new("dataset.synthetic", e))?,
            DatasetSource::Manifest(m) => {
                if !loaded.resolve(&m.path).is_file() {
                    return Err(ConfigError::new("dataset.manifest.path", format!("{} is not a file", m.path.display())));
                }
                if !loaded.resolve(&m.image_root).is_dir() {
                    return Err(ConfigError::new(
                        "dataset.manifest.image_root",
                        format!("{} is not a directory", m.image_root.display()),
                    ));
                }
                if classes.is_empty() {
                    return Err(ConfigError::new("dataset.manifest.classes", "must name at least one class"));
                }
            }
        }
        self.split.validate().map_err(|e| ConfigError::new("split", e))?;

        let spec = self.model_spec()?;
        let blocks = spec.backbone.num_blocks();
        spec.placement.validate(blocks).map_err(|e| ConfigError::new("model.placement", e))?;
        let field = if self.model.spec.is_some() { "model.spec" } else { "model" };
        spec.validate().map_err(|e| ConfigError::new(field, e))?;
        if spec.num_labels != classes.len() {
            return Err(ConfigError::new(
                "model.spec.num_labels",
                format!("{} labels but the dataset has {} classes", spec.num_labels, classes.len()),
            ));
        }
        if spec.input.channels != 1 || spec.input.height != spec.input.width {
            return Err(ConfigError::new("model.spec.input", "inputs must be single-channel and square"));
        }

        let plan = &self.training;
        if !(1..=2).contains(&plan.stages.len()) {
            return Err(ConfigError::new("training.stages", format!("expected 1 or 2 stages, got {}", plan.stages.len())));
        }
        for (i, s) in plan.stages.iter().enumerate() {
            let path = format!("training.stages[{i}]");
            if !(s.learning_rate > 0.0) {
                return Err(ConfigError::new(format!("{path}.learning_rate"), "must be positive"));
            }
            s.validate().map_err(|e| ConfigError::new(path, e))?;
        }
        plan.loss
            .validate(plan.stages.len())
            .map_err(|e| ConfigError::new("training.loss", e))?;

        if self.evaluation.batch_size == 0 {
            return Err(ConfigError::new("evaluation.batch_size", "must be at least 1"));
        }
        if let Some(list) = &self.ablation.placements {
            if list.is_empty() {
                return Err(ConfigError::new("ablation.placements", "list is empty"));
            }
            for (i, p) in list.iter().enumerate() {
                p.validate(blocks)
                    .map_err(|e| ConfigError::new(format!("ablation.placements[{i}]"), e))?;
            }
        }
        if let Some(s) = &self.ablation.strategy {
            let e = s.epochs;
            if e.one_stage == 0 || e.stage1 == 0 || e.stage2 == 0 {
                return Err(ConfigError::new("ablation.strategy.epochs", "every budget must be at least 1"));
            }
            s.focal.validate().map_err(|e| ConfigError::new("ablation.strategy.focal", e))?;
        }
        Ok(spec)
    }
}
