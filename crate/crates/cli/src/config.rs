//! Experiment configuration read from TOML.
//!
//! Every key has a default, so an empty file is a valid config. Unknown keys
//! anywhere are rejected with the offending name in the message.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use diablo_core::model::ModuleShape;
use diablo_core::trainer::{AdamW, QuantSpec, ScheduleKind, TaskKind, TaskSpec, TrainConfig};
use diablo_core::{AdapterSpec, DType, ModelConfig, ModuleTag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Label used in reports; defaults to the config file stem.
    pub name: String,
    pub seed: u64,
    /// `"f32"` or `"f64"`.
    pub dtype: String,
    pub steps: usize,
    /// `0` trains on the full sample set every step.
    pub batch_size: usize,
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub adapter: AdapterSection,
    pub task: TaskSection,
    pub optimizer: OptimizerSection,
    pub quant: QuantSection,
    pub gradcheck: GradcheckSection,
    pub bench: BenchSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: String::new(),
            seed: 0,
            dtype: "f32".into(),
            steps: 1000,
            batch_size: 64,
            out_dir: PathBuf::from("runs/default"),
            model: ModelSection::default(),
            adapter: AdapterSection::default(),
            task: TaskSection::default(),
            optimizer: OptimizerSection::default(),
            quant: QuantSection::default(),
            gradcheck: GradcheckSection::default(),
            bench: BenchSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// One linear layer sized by `[task]`.
    #[default]
    Linear,
    /// Stack of linear layers with SiLU, widths from `widths`.
    Mlp,
    /// Single attention + gated feed-forward block.
    Transformer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub widths: Vec<usize>,
    pub hidden: usize,
    pub ffn: usize,
    pub seq_len: usize,
    /// Shape-only preset for `params`, e.g. `"llama2-7b-shapes"`.
    pub preset: Option<String>,
    /// Inline per-layer shapes for `params` when no preset is given.
    pub layers: usize,
    pub modules: Vec<ModuleShape>,
    pub total_params: Option<u64>,
    /// Tag list such as `"QKVUD"`; defaults to every module of the model.
    pub targets: Option<String>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Linear,
            widths: vec![16, 12, 8],
            hidden: 8,
            ffn: 12,
            seq_len: 4,
            preset: None,
            layers: 1,
            modules: Vec::new(),
            total_params: None,
            targets: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterChoice {
    #[default]
    Diablo,
    Lora,
    Full,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSection {
    pub kind: AdapterChoice,
    pub num_blocks: usize,
    pub rank: usize,
    /// Multiplier on the low-rank product.
    pub scaling: f64,
}

impl Default for AdapterSection {
    fn default() -> Self {
        Self {
            kind: AdapterChoice::Diablo,
            num_blocks: 4,
            rank: 2,
            scaling: 1.0,
        }
    }
}

impl AdapterSection {
    pub fn spec(&self) -> AdapterSpec {
        match self.kind {
            AdapterChoice::Diablo => AdapterSpec::BlockDiagonal {
                num_blocks: self.num_blocks,
            },
            AdapterChoice::Lora => AdapterSpec::Lora {
                rank: self.rank,
                scaling: self.scaling,
            },
            AdapterChoice::Full => AdapterSpec::Full,
            AdapterChoice::None => AdapterSpec::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub in_features: usize,
    pub out_features: usize,
    pub num_blocks: usize,
    pub rank: usize,
    pub noise: f64,
    pub samples: usize,
    pub separation: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        let t = TaskSpec::default();
        Self {
            kind: t.kind,
            in_features: t.in_features,
            out_features: t.out_features,
            num_blocks: t.num_blocks,
            rank: t.rank,
            noise: t.noise,
            samples: t.samples,
            separation: t.separation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub lr: f64,
    pub warmup_steps: usize,
    /// Overrides `warmup_steps` with `ceil(ratio · steps)` when set.
    pub warmup_ratio: Option<f64>,
    pub schedule: ScheduleKind,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let a = AdamW::default();
        Self {
            lr: 1e-2,
            warmup_steps: 100,
            warmup_ratio: None,
            schedule: ScheduleKind::Linear,
            weight_decay: a.weight_decay,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantSection {
    /// `0` keeps the base dense; `2` or `4` quantizes it.
    pub bits: u8,
    pub group_size: usize,
}

impl Default for QuantSection {
    fn default() -> Self {
        Self {
            bits: 0,
            group_size: diablo_core::quant::DEFAULT_GROUP_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub tolerance: f64,
    pub step: f64,
    /// Independent random instances to check.
    pub trials: usize,
    /// Input rows per instance.
    pub batch: usize,
    /// Standard deviation of the random adapter parameters under test.
    pub param_std: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            step: diablo_core::oracle::DEFAULT_FD_STEP,
            trials: 5,
            batch: 3,
            param_std: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    /// Untimed runs before measurement.
    pub warmup_runs: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self { warmup_runs: 1 }
    }
}

/// Invalid configuration; reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| invalid(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg =
            Self::from_toml(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        if cfg.name.is_empty() {
            cfg.name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.dtype()?;
        if !(self.optimizer.lr.is_finite() && self.optimizer.lr >= 0.0) {
            return Err(invalid(format!(
                "optimizer.lr must be finite and >= 0, got {}",
                self.optimizer.lr
            )));
        }
        if let Some(r) = self.optimizer.warmup_ratio {
            if !(0.0..=1.0).contains(&r) {
                return Err(invalid(format!(
                    "optimizer.warmup_ratio must be in [0, 1], got {r}"
                )));
            }
        }
        if !matches!(self.quant.bits, 0 | 2 | 4) {
            return Err(invalid(format!(
                "quant.bits must be 0, 2 or 4, got {}",
                self.quant.bits
            )));
        }
        if self.quant.group_size == 0 {
            return Err(invalid("quant.group_size must be positive"));
        }
        match self.adapter.kind {
            AdapterChoice::Diablo if self.adapter.num_blocks == 0 => {
                return Err(invalid("adapter.num_blocks must be at least 1"))
            }
            AdapterChoice::Lora if self.adapter.rank == 0 => {
                return Err(invalid("adapter.rank must be at least 1"))
            }
            _ => {}
        }
        if let Some(t) = &self.model.targets {
            ModuleTag::parse_list(t).map_err(|e| invalid(format!("model.targets: {e}")))?;
        }
        if self.gradcheck.trials == 0 || self.gradcheck.batch == 0 {
            return Err(invalid(
                "gradcheck.trials and gradcheck.batch must be positive",
            ));
        }
        Ok(())
    }

    pub fn dtype(&self) -> Result<DType, ConfigError> {
        self.dtype.parse().map_err(|_| {
            invalid(format!(
                "dtype must be \"f32\" or \"f64\", got {:?}",
                self.dtype
            ))
        })
    }

    pub fn task_spec(&self) -> TaskSpec {
        let t = &self.task;
        TaskSpec {
            kind: t.kind,
            in_features: t.in_features,
            out_features: t.out_features,
            num_blocks: t.num_blocks,
            rank: t.rank,
            noise: t.noise,
            samples: t.samples,
            separation: t.separation,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let o = &self.optimizer;
        let warmup_steps = match o.warmup_ratio {
            Some(r) => (r * self.steps as f64).ceil() as usize,
            None => o.warmup_steps,
        };
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            seed: self.seed,
            lr: o.lr,
            warmup_steps,
            schedule: o.schedule,
            adamw: AdamW {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
            },
        }
    }

    pub fn quant_spec(&self) -> Option<QuantSpec> {
        (self.quant.bits != 0).then_some(QuantSpec {
            bits: self.quant.bits,
            group_size: self.quant.group_size,
        })
    }

    /// Explicit targets, if the config lists any.
    pub fn targets(&self) -> Option<Vec<ModuleTag>> {
        self.model
            .targets
            .as_deref()
            .map(|t| ModuleTag::parse_list(t).expect("validated"))
    }

    /// Shapes used by `params`: a preset, inline modules, or the trainable model.
    pub fn shape_config(&self) -> Result<ModelConfig, ConfigError> {
        let m = &self.model;
        if let Some(name) = &m.preset {
            if !m.modules.is_empty() {
                return Err(invalid(
                    "model.preset and model.modules are mutually exclusive",
                ));
            }
            return ModelConfig::preset(name).map_err(|e| invalid(e.to_string()));
        }
        let modules = if !m.modules.is_empty() {
            m.modules.clone()
        } else {
            let linear = |tag, i, o| ModuleShape {
                tag,
                in_features: i,
                out_features: o,
            };
            match m.kind {
                ModelKind::Linear => vec![linear(
                    ModuleTag::Generic,
                    self.task.in_features,
                    self.task.out_features,
                )],
                ModelKind::Mlp => m
                    .widths
                    .windows(2)
                    .map(|w| linear(ModuleTag::Generic, w[0], w[1]))
                    .collect(),
                ModelKind::Transformer => {
                    let (h, f) = (m.hidden, m.ffn);
                    vec![
                        linear(ModuleTag::Q, h, h),
                        linear(ModuleTag::K, h, h),
                        linear(ModuleTag::V, h, h),
                        linear(ModuleTag::O, h, h),
                        linear(ModuleTag::G, h, f),
                        linear(ModuleTag::U, h, f),
                        linear(ModuleTag::D, f, h),
                    ]
                }
            }
        };
        let cfg = ModelConfig {
            name: if self.name.is_empty() {
                "inline".into()
            } else {
                self.name.clone()
            },
            num_layers: m.layers,
            modules,
            hidden_size: 0,
            vocab_size: 0,
            tied_embeddings: false,
            norms_per_layer: 0,
            final_norm: false,
            total_params: m.total_params,
            source: None,
        };
        cfg.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(
            ExperimentConfig::from_toml("").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn unknown_keys_name_the_field() {
        let err = ExperimentConfig::from_toml("[optimizer]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.0.contains("learning_rate"), "{err}");
        let err = ExperimentConfig::from_toml("stesp = 3\n").unwrap_err();
        assert!(err.0.contains("stesp"), "{err}");
    }

    #[test]
    fn value_checks() {
        assert!(ExperimentConfig::from_toml("dtype = \"f16\"").is_err());
        assert!(ExperimentConfig::from_toml("[quant]\nbits = 3").is_err());
        assert!(ExperimentConfig::from_toml("[adapter]\nkind = \"lora\"\nrank = 0").is_err());
        assert!(ExperimentConfig::from_toml("[model]\ntargets = \"QZ\"").is_err());
    }

    #[test]
    fn warmup_ratio_overrides_steps() {
        let cfg =
            ExperimentConfig::from_toml("steps = 1000\n[optimizer]\nwarmup_ratio = 0.03").unwrap();
        assert_eq!(cfg.train_config().warmup_steps, 30);
    }

    #[test]
    fn inline_shapes() {
        let cfg = ExperimentConfig::from_toml(
            "[model]\nmodules = [{ tag = \"generic\", in_features = 4, out_features = 4 }]",
        )
        .unwrap();
        let shapes = cfg.shape_config().unwrap();
        assert_eq!(shapes.linear_params(), 16);
    }
}
