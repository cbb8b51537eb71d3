//! Experiment configuration: strict JSON schema, semantic validation, and
//! the content digest that keys the artifacts directory. One file fully
//! describes one experiment; trial seeds drive every stochastic choice.

use std::path::{Path, PathBuf};

use driftbench::data::{CifarVariant, Dataset, SplitSpec, SyntheticSpec};
use driftbench::losses::{HeadMode, LossWeights};
use driftbench::model::EncoderSpec;
use driftbench::trainer::{MethodSpec, TrainSchedule};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic(SyntheticSpec),
    Cifar { dir: PathBuf, variant: CifarVariant },
}

impl DatasetConfig {
    pub fn dim(&self) -> usize {
        match self {
            DatasetConfig::Synthetic(spec) => spec.dim,
            DatasetConfig::Cifar { .. } => 3072,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetConfig::Synthetic(spec) => spec.classes,
            DatasetConfig::Cifar { variant, .. } => variant.num_classes(),
        }
    }

    pub fn build(&self) -> Result<Dataset> {
        match self {
            DatasetConfig::Synthetic(spec) => Ok(driftbench::data::generate_synthetic(spec)?),
            DatasetConfig::Cifar { dir, variant } => {
                Ok(driftbench::data::load_cifar_dataset(dir, *variant)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Hidden widths front to back; the input width comes from the dataset.
    pub hidden_dims: Vec<usize>,
}

impl EncoderConfig {
    pub fn to_spec(&self, input_dim: usize) -> EncoderSpec {
        EncoderSpec {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
        }
    }
}

/// Task split without a seed; each trial reuses its own seed here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitConfig {
    Uniform { tasks: usize, classes_per_task: usize },
    Expansion { first: usize, tail: Vec<usize> },
}

impl SplitConfig {
    pub fn with_seed(&self, seed: u64) -> SplitSpec {
        match self {
            SplitConfig::Uniform {
                tasks,
                classes_per_task,
            } => SplitSpec::Uniform {
                tasks: *tasks,
                classes_per_task: *classes_per_task,
                seed,
            },
            SplitConfig::Expansion { first, tail } => SplitSpec::Expansion {
                first: *first,
                tail: tail.clone(),
                seed,
            },
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.with_seed(0).sizes()
    }
}

/// Training schedule without a seed; each trial reuses its own seed here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub lr_decay_epochs: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_decay_factor() -> f64 {
    10.0
}

fn default_weight_decay() -> f64 {
    2e-4
}

impl ScheduleConfig {
    pub fn with_seed(&self, seed: u64) -> TrainSchedule {
        TrainSchedule {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_decay_epochs: self.lr_decay_epochs.clone(),
            lr_decay_factor: self.lr_decay_factor,
            weight_decay: self.weight_decay,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    /// "naive", "upper_bound", or '+'-joined transfer terms.
    pub name: String,
    pub head_mode: HeadMode,
    #[serde(default)]
    pub balanced_bce: bool,
    #[serde(default = "default_feat_tap")]
    pub feat_tap: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub weights: LossWeights,
}

fn default_feat_tap() -> String {
    "pen".to_string()
}

fn default_temperature() -> f64 {
    1.0
}

impl MethodConfig {
    pub fn to_spec(&self) -> Result<MethodSpec> {
        let mut spec = MethodSpec::parse(&self.name, self.head_mode)
            .map_err(|e| CliError::Config(format!("method: {e}")))?;
        spec.balanced_bce = self.balanced_bce;
        spec.feat_tap = self.feat_tap.clone();
        spec.temperature = self.temperature;
        spec.weights = self.weights;
        spec.validate()
            .map_err(|e| CliError::Config(format!("method: {e}")))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Fraction of classes held out as the auxiliary pre-training split.
    #[serde(default)]
    pub aux_fraction: Option<f64>,
    /// Saved model whose encoder initializes each trial instead.
    #[serde(default)]
    pub encoder_file: Option<PathBuf>,
    #[serde(default = "default_pretrain_head")]
    pub head_mode: HeadMode,
    /// Defaults to the main schedule when absent.
    #[serde(default)]
    pub schedule: Option<ScheduleConfig>,
}

fn default_true() -> bool {
    true
}

fn default_pretrain_head() -> HeadMode {
    HeadMode::Softmax
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// First-task holdout rows reserved for the drift probe.
    pub probe_size: usize,
    /// Taps the cka command reports; None means every model tap.
    pub taps: Option<Vec<String>>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            probe_size: 256,
            taps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub encoder: EncoderConfig,
    pub split: SplitConfig,
    pub method: MethodConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
}

/// Digest view: everything that determines the artifacts except where they
/// land on disk.
#[derive(Serialize)]
struct DigestView<'a> {
    dataset: &'a DatasetConfig,
    encoder: &'a EncoderConfig,
    split: &'a SplitConfig,
    method: &'a MethodConfig,
    schedule: &'a ScheduleConfig,
    pretrain: &'a Option<PretrainConfig>,
    analysis: &'a AnalysisConfig,
    seeds: &'a [u64],
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Semantic checks beyond the schema; every message names the field.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CliError::Config(msg));
        match &self.dataset {
            DatasetConfig::Synthetic(spec) => {
                if spec.classes < 2 {
                    return fail(format!(
                        "dataset.synthetic.classes: need at least 2, got {}",
                        spec.classes
                    ));
                }
                if spec.per_class < 2 {
                    return fail(format!(
                        "dataset.synthetic.per_class: need at least 2 for a train/test split, got {}",
                        spec.per_class
                    ));
                }
                if spec.dim == 0 {
                    return fail("dataset.synthetic.dim: must be positive".into());
                }
                if !(spec.separation.is_finite() && spec.separation >= 0.0) {
                    return fail(format!(
                        "dataset.synthetic.separation: must be finite and non-negative, got {}",
                        spec.separation
                    ));
                }
            }
            DatasetConfig::Cifar { dir, .. } => {
                if dir.as_os_str().is_empty() {
                    return fail("dataset.cifar.dir: must not be empty".into());
                }
            }
        }
        if self.encoder.hidden_dims.is_empty() {
            return fail("encoder.hidden_dims: need at least one hidden layer".into());
        }
        if self.encoder.hidden_dims.contains(&0) {
            return fail("encoder.hidden_dims: widths must be positive".into());
        }

        let sizes = self.split.sizes();
        if sizes.is_empty() {
            return fail("split: needs at least one task".into());
        }
        if sizes.contains(&0) {
            return fail("split: every task needs at least one class".into());
        }
        let available = self.continual_classes()?;
        let needed: usize = sizes.iter().sum();
        if needed > available {
            return fail(format!(
                "split: tasks need {needed} classes but only {available} are available \
                 after the auxiliary split"
            ));
        }

        self.method.to_spec()?;
        self.schedule
            .with_seed(0)
            .validate()
            .map_err(|e| CliError::Config(format!("schedule: {e}")))?;

        if let Some(pre) = &self.pretrain {
            if pre.enabled {
                match (&pre.aux_fraction, &pre.encoder_file) {
                    (Some(_), Some(_)) => {
                        return fail(
                            "pretrain: aux_fraction and encoder_file are mutually exclusive"
                                .into(),
                        );
                    }
                    (None, None) => {
                        return fail(
                            "pretrain: enabled but neither aux_fraction nor encoder_file is set"
                                .into(),
                        );
                    }
                    (Some(f), None) => {
                        if !(f.is_finite() && (0.0..1.0).contains(f) && *f > 0.0) {
                            return fail(format!(
                                "pretrain.aux_fraction: must be inside (0,1), got {f}"
                            ));
                        }
                    }
                    (None, Some(path)) => {
                        if path.as_os_str().is_empty() {
                            return fail("pretrain.encoder_file: must not be empty".into());
                        }
                    }
                }
                if let Some(s) = &pre.schedule {
                    s.with_seed(0)
                        .validate()
                        .map_err(|e| CliError::Config(format!("pretrain.schedule: {e}")))?;
                }
            }
        }

        if self.analysis.probe_size < 2 {
            return fail(format!(
                "analysis.probe_size: drift comparison needs at least 2 rows, got {}",
                self.analysis.probe_size
            ));
        }
        if let Some(taps) = &self.analysis.taps {
            if taps.is_empty() {
                return fail("analysis.taps: empty list; omit the field for all taps".into());
            }
            let valid = self.tap_names();
            for t in taps {
                if !valid.contains(t) {
                    return fail(format!(
                        "analysis.taps: unknown tap '{t}', expected one of {valid:?}"
                    ));
                }
            }
        }

        if self.output_dir.as_os_str().is_empty() {
            return fail("output_dir: must not be empty".into());
        }
        if self.seeds.is_empty() {
            return fail("seeds: need at least one trial seed".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return fail("seeds: duplicate trial seeds".into());
        }
        Ok(())
    }

    /// Classes left for the continual phase once the auxiliary split (if
    /// any) takes its share.
    pub fn continual_classes(&self) -> Result<usize> {
        let total = self.dataset.num_classes();
        match &self.pretrain {
            Some(pre) if pre.enabled => {
                if let Some(f) = pre.aux_fraction {
                    let aux = (total as f64 * f).round() as usize;
                    if aux + 2 > total {
                        return Err(CliError::Config(format!(
                            "pretrain.aux_fraction: {f} leaves fewer than 2 continual classes"
                        )));
                    }
                    Ok(total - aux)
                } else {
                    Ok(total)
                }
            }
            _ => Ok(total),
        }
    }

    /// Valid tap names for this encoder depth, rear-aligned, plus "linear".
    pub fn tap_names(&self) -> Vec<String> {
        let h = self.encoder.hidden_dims.len();
        let mut names: Vec<String> = (0..h)
            .map(|i| {
                if i == h - 1 {
                    "pen".to_string()
                } else {
                    format!("L-{}", h - i)
                }
            })
            .collect();
        names.push("linear".to_string());
        names
    }

    /// First 16 hex digits of the SHA-256 of the resolved config, output
    /// location excluded. Keys the artifacts directory.
    pub fn digest(&self) -> String {
        let view = DigestView {
            dataset: &self.dataset,
            encoder: &self.encoder,
            split: &self.split,
            method: &self.method,
            schedule: &self.schedule,
            pretrain: &self.pretrain,
            analysis: &self.analysis,
            seeds: &self.seeds,
        };
        let json = serde_json::to_vec(&view).expect("config serializes");
        let hash = Sha256::digest(&json);
        let mut hex = String::with_capacity(16);
        for byte in hash.iter().take(8) {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }

    /// The persisted form: all defaults materialized.
    pub fn resolved_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
