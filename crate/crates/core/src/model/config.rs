use serde::{Deserialize, Serialize};

use super::ModuleTag;
use crate::error::{Error, Result};

/// Weight shape of one projection inside a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleShape {
    pub tag: ModuleTag,
    pub in_features: usize,
    pub out_features: usize,
}

/// Architecture described by shapes alone, for parameter and FLOP accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub num_layers: usize,
    /// Projections of one layer; every layer is identical.
    pub modules: Vec<ModuleShape>,
    #[serde(default)]
    pub hidden_size: usize,
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default)]
    pub tied_embeddings: bool,
    #[serde(default)]
    pub norms_per_layer: usize,
    #[serde(default)]
    pub final_norm: bool,
    /// Published parameter count, when known.
    #[serde(default)]
    pub total_params: Option<u64>,
    #[serde(default)]
    pub source: Option<String>,
}

pub const PRESET_NAMES: [&str; 3] = ["llama2-7b-shapes", "llama3-8b-shapes", "mistral-7b-shapes"];

const PRESETS: [(&str, &str); 3] = [
    (
        "llama2-7b-shapes",
        include_str!("../../presets/llama2-7b-shapes.toml"),
    ),
    (
        "llama3-8b-shapes",
        include_str!("../../presets/llama3-8b-shapes.toml"),
    ),
    (
        "mistral-7b-shapes",
        include_str!("../../presets/mistral-7b-shapes.toml"),
    ),
];

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            Error::Config(format!(
                "unknown preset {name:?}; available: {}",
                PRESET_NAMES.join(", ")
            ))
        })?;
        Self::from_toml(text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.modules.is_empty() {
            return Err(Error::Config(format!(
                "model {:?} needs at least one layer and one module",
                self.name
            )));
        }
        if let Some(m) = self
            .modules
            .iter()
            .find(|m| m.in_features == 0 || m.out_features == 0)
        {
            return Err(Error::Config(format!(
                "module {} of {:?} has a zero dimension",
                m.tag, self.name
            )));
        }
        Ok(())
    }

    /// Parameters of all linear projections across layers.
    pub fn linear_params(&self) -> u64 {
        let per_layer: u64 = self
            .modules
            .iter()
            .map(|m| (m.in_features * m.out_features) as u64)
            .sum();
        per_layer * self.num_layers as u64
    }

    /// Linear projections plus embeddings and norm gains.
    pub fn computed_total(&self) -> u64 {
        let (h, v) = (self.hidden_size as u64, self.vocab_size as u64);
        let embeddings = v * h * if self.tied_embeddings { 1 } else { 2 };
        let norms =
            (self.num_layers * self.norms_per_layer + usize::from(self.final_norm)) as u64 * h;
        self.linear_params() + embeddings + norms
    }

    /// Published total when present, else the computed one.
    pub fn total(&self) -> u64 {
        self.total_params.unwrap_or_else(|| self.computed_total())
    }

    pub fn module_tags(&self) -> Vec<ModuleTag> {
        self.modules.iter().map(|m| m.tag).collect()
    }

    /// Rejects targets that name no module of this config.
    pub fn check_targets(&self, targets: &[ModuleTag]) -> Result<()> {
        let tags = self.module_tags();
        if let Some(bad) = targets.iter().find(|t| !tags.contains(t)) {
            return Err(Error::Config(format!(
                "target {bad} is not a module of {:?}; valid tags: {}",
                self.name,
                tags.iter()
                    .map(|t| t.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_published_totals() {
        for name in PRESET_NAMES {
            let cfg = ModelConfig::preset(name).unwrap();
            let published = cfg.total_params.unwrap() as f64;
            let rel = (cfg.computed_total() as f64 - published).abs() / published;
            assert!(
                rel < 0.01,
                "{name}: computed {} vs {published}",
                cfg.computed_total()
            );
        }
        assert_eq!(
            ModelConfig::preset("llama2-7b-shapes")
                .unwrap()
                .computed_total(),
            6_738_415_616
        );
    }

    #[test]
    fn unknown_preset_and_fields() {
        let err = ModelConfig::preset("gpt-9").unwrap_err().to_string();
        assert!(err.contains("llama2-7b-shapes"));
        assert!(ModelConfig::from_toml("name='x'\nnum_layers=1\nmodules=[]\nbogus=1").is_err());
        assert!(ModelConfig::from_toml("name='x'\nnum_layers=1\nmodules=[]").is_err());
    }

    #[test]
    fn target_validation() {
        let cfg = ModelConfig::preset("llama2-7b-shapes").unwrap();
        assert!(cfg.check_targets(&[ModuleTag::Q, ModuleTag::D]).is_ok());
        assert!(cfg.check_targets(&[ModuleTag::Generic]).is_err());
    }
}
