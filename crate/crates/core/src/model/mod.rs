//! Small trainable networks built from [`AdaptedLinear`] layers.

mod config;
mod gradcheck;
mod mlp;
mod transformer;

pub use config::{ModelConfig, ModuleShape, PRESET_NAMES};
pub use gradcheck::{
    check_model_gradients, flat_params, randomize_adapters, set_flat_params, GradCheckOptions,
    GradTamper,
};
pub use mlp::{Mlp, MlpCache};
pub use transformer::{TinyTransformerBlock, TransformerCache};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::{Adapter, AdapterGrads, AdapterSpec};
use crate::error::{Error, Result};
use crate::quant::{dequant_matmul, dequant_matmul_bt, QuantizedWeight};
use crate::rng::Rng;
use crate::tensor::{matmul_nt, Element, Tensor};

/// Projection names used for adapter targeting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModuleTag {
    #[serde(rename = "Q")]
    Q,
    #[serde(rename = "K")]
    K,
    #[serde(rename = "V")]
    V,
    #[serde(rename = "O")]
    O,
    /// Gate projection of the gated feed-forward.
    #[serde(rename = "G")]
    G,
    /// Up projection.
    #[serde(rename = "U")]
    U,
    /// Down projection.
    #[serde(rename = "D")]
    D,
    #[serde(rename = "generic")]
    Generic,
}

impl ModuleTag {
    pub const ALL: [ModuleTag; 8] = [
        ModuleTag::Q,
        ModuleTag::K,
        ModuleTag::V,
        ModuleTag::O,
        ModuleTag::G,
        ModuleTag::U,
        ModuleTag::D,
        ModuleTag::Generic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleTag::Q => "Q",
            ModuleTag::K => "K",
            ModuleTag::V => "V",
            ModuleTag::O => "O",
            ModuleTag::G => "G",
            ModuleTag::U => "U",
            ModuleTag::D => "D",
            ModuleTag::Generic => "generic",
        }
    }

    /// Parses `"Q K V U D"`, `"Q,K,V"` or `"QKVUD"`.
    pub fn parse_list(s: &str) -> Result<Vec<ModuleTag>> {
        let mut out = Vec::new();
        for tok in s
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
        {
            if let Ok(tag) = tok.parse() {
                out.push(tag);
            } else {
                for c in tok.chars() {
                    out.push(c.to_string().parse()?);
                }
            }
        }
        Ok(out)
    }
}

impl fmt::Display for ModuleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModuleTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModuleTag::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown module tag {s:?}; valid tags: {}",
                    ModuleTag::ALL.map(|t| t.as_str()).join(", ")
                ))
            })
    }
}

/// Frozen base weight of a linear layer.
#[derive(Debug, Clone, PartialEq)]
pub enum BaseWeight<T> {
    Dense(Tensor<T>),
    Quantized(QuantizedWeight),
}

impl<T: Element> BaseWeight<T> {
    pub fn in_features(&self) -> usize {
        match self {
            BaseWeight::Dense(w) => w.shape()[0],
            BaseWeight::Quantized(q) => q.in_features(),
        }
    }

    pub fn out_features(&self) -> usize {
        match self {
            BaseWeight::Dense(w) => w.shape()[1],
            BaseWeight::Quantized(q) => q.out_features(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            BaseWeight::Dense(w) => x.matmul(w),
            BaseWeight::Quantized(q) => dequant_matmul(x, q),
        }
    }

    pub fn input_grad(&self, g_y: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            BaseWeight::Dense(w) => matmul_nt(g_y, w),
            BaseWeight::Quantized(q) => dequant_matmul_bt(g_y, q),
        }
    }

    pub fn to_dense(&self) -> Tensor<T> {
        match self {
            BaseWeight::Dense(w) => w.clone(),
            BaseWeight::Quantized(q) => q.dequantize(),
        }
    }
}

/// Gradients produced by [`AdaptedLinear::backward`].
#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    pub adapter: Option<AdapterGrads<T>>,
    pub input: Option<Tensor<T>>,
}

/// `Y = X·W (+ X·Δ)` with a frozen `W` and an optional trainable adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLinear<T> {
    pub base: BaseWeight<T>,
    pub adapter: Option<Adapter<T>>,
    pub tag: ModuleTag,
}

impl<T: Element> AdaptedLinear<T> {
    pub fn new(base: BaseWeight<T>, tag: ModuleTag) -> Self {
        Self {
            base,
            adapter: None,
            tag,
        }
    }

    pub fn dense(weight: Tensor<T>, tag: ModuleTag) -> Result<Self> {
        weight.dims2("AdaptedLinear::dense")?;
        Ok(Self::new(BaseWeight::Dense(weight), tag))
    }

    /// Base weight with i.i.d. `N(0, 1/m₁)` entries.
    pub fn random(in_features: usize, out_features: usize, tag: ModuleTag, rng: &mut Rng) -> Self {
        let std = 1.0 / (in_features as f64).sqrt();
        Self::new(
            BaseWeight::Dense(rng.normal_tensor(&[in_features, out_features], std)),
            tag,
        )
    }

    pub fn in_features(&self) -> usize {
        self.base.in_features()
    }

    pub fn out_features(&self) -> usize {
        self.base.out_features()
    }

    pub fn trainable_parameters(&self) -> usize {
        self.adapter.as_ref().map_or(0, Adapter::num_params)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let w_out = self.base.forward(x)?;
        match &self.adapter {
            Some(a) => a.forward(x, &w_out),
            None => Ok(w_out),
        }
    }

    pub fn backward(
        &self,
        x: &Tensor<T>,
        g_y: &Tensor<T>,
        need_input: bool,
    ) -> Result<LinearGrads<T>> {
        let adapter = match &self.adapter {
            Some(a) => Some(a.param_grads(x, g_y)?),
            None => None,
        };
        let input = if need_input {
            let mut g_x = self.base.input_grad(g_y)?;
            if let Some(a) = &self.adapter {
                g_x.add_assign(&a.input_grad(g_y)?)?;
            }
            Some(g_x)
        } else {
            None
        };
        Ok(LinearGrads { adapter, input })
    }
}

/// A network whose trainable state lives in the adapters of its linear layers.
pub trait AdapterHost<T: Element> {
    /// Linear layers in a fixed order; gradients are reported in the same order.
    fn linears(&self) -> Vec<&AdaptedLinear<T>>;
    fn linears_mut(&mut self) -> Vec<&mut AdaptedLinear<T>>;

    fn module_tags(&self) -> BTreeSet<ModuleTag> {
        self.linears().iter().map(|l| l.tag).collect()
    }

    /// Trainable element count; frozen bases are excluded.
    fn trainable_parameters(&self) -> usize {
        self.linears()
            .iter()
            .map(|l| l.trainable_parameters())
            .sum()
    }

    fn base_parameters(&self) -> usize {
        self.linears()
            .iter()
            .map(|l| l.in_features() * l.out_features())
            .sum()
    }

    /// Mutable trainable tensors, flattened across layers.
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.linears_mut()
            .into_iter()
            .filter_map(|l| l.adapter.as_mut())
            .flat_map(|a| a.params_mut())
            .collect()
    }

    /// Describes the layer shapes as a one-layer [`ModelConfig`].
    fn shape_config(&self, name: &str) -> ModelConfig {
        ModelConfig {
            name: name.to_string(),
            num_layers: 1,
            modules: self
                .linears()
                .iter()
                .map(|l| ModuleShape {
                    tag: l.tag,
                    in_features: l.in_features(),
                    out_features: l.out_features(),
                })
                .collect(),
            hidden_size: 0,
            vocab_size: 0,
            tied_embeddings: false,
            norms_per_layer: 0,
            final_norm: false,
            total_params: None,
            source: None,
        }
    }
}

/// A differentiable model: forward caches what backward needs.
pub trait Model<T: Element>: AdapterHost<T> {
    type Cache;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Self::Cache)>;

    /// Adapter gradients aligned with [`AdapterHost::linears`] (`None` for frozen layers).
    fn backward(
        &self,
        cache: &Self::Cache,
        g_y: &Tensor<T>,
    ) -> Result<Vec<Option<AdapterGrads<T>>>>;

    fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x)?.0)
    }
}

impl<T: Element> AdapterHost<T> for AdaptedLinear<T> {
    fn linears(&self) -> Vec<&AdaptedLinear<T>> {
        vec![self]
    }

    fn linears_mut(&mut self) -> Vec<&mut AdaptedLinear<T>> {
        vec![self]
    }
}

impl<T: Element> Model<T> for AdaptedLinear<T> {
    type Cache = Tensor<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        Ok((AdaptedLinear::forward(self, x)?, x.clone()))
    }

    fn backward(&self, x: &Tensor<T>, g_y: &Tensor<T>) -> Result<Vec<Option<AdapterGrads<T>>>> {
        Ok(vec![AdaptedLinear::backward(self, x, g_y, false)?.adapter])
    }
}

/// Attaches fresh adapters to every layer whose tag is in `targets`.
///
/// Every target must name a module present in the model. Untargeted layers
/// are left as they are.
pub fn attach_adapters<T: Element, M: AdapterHost<T> + ?Sized>(
    model: &mut M,
    spec: AdapterSpec,
    targets: &[ModuleTag],
    rng: &mut Rng,
) -> Result<()> {
    let available = model.module_tags();
    if let Some(bad) = targets.iter().find(|t| !available.contains(t)) {
        return Err(Error::Config(format!(
            "target {bad} is not a module of this model; valid tags: {}",
            available
                .iter()
                .map(|t| t.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    if matches!(spec, AdapterSpec::None) {
        return Ok(());
    }
    for layer in model.linears_mut() {
        if targets.contains(&layer.tag) {
            layer.adapter = spec.build(layer.in_features(), layer.out_features(), rng)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tag_parsing() {
        assert_eq!(
            ModuleTag::parse_list("QKVUD").unwrap(),
            vec![
                ModuleTag::Q,
                ModuleTag::K,
                ModuleTag::V,
                ModuleTag::U,
                ModuleTag::D
            ]
        );
        assert_eq!(
            ModuleTag::parse_list("q, o generic").unwrap(),
            vec![ModuleTag::Q, ModuleTag::O, ModuleTag::Generic]
        );
        let err = ModuleTag::parse_list("QX").unwrap_err().to_string();
        assert!(err.contains("valid tags"), "{err}");
    }

    #[test]
    fn attach_counts_and_validation() {
        let mut rng = Rng::new(0);
        let mut layer = AdaptedLinear::<f32>::random(8, 8, ModuleTag::Generic, &mut rng);
        attach_adapters(
            &mut layer,
            AdapterSpec::BlockDiagonal { num_blocks: 4 },
            &[],
            &mut rng,
        )
        .unwrap();
        assert_eq!(layer.trainable_parameters(), 0);
        attach_adapters(
            &mut layer,
            AdapterSpec::BlockDiagonal { num_blocks: 4 },
            &[ModuleTag::Generic],
            &mut rng,
        )
        .unwrap();
        assert_eq!(layer.trainable_parameters(), 16);

        let err = attach_adapters(&mut layer, AdapterSpec::Full, &[ModuleTag::Q], &mut rng)
            .unwrap_err()
            .to_string();
        assert!(err.contains("valid tags: generic"), "{err}");
    }

    #[test]
    fn quantized_base_forward_matches_dequantized_dense() {
        let mut rng = Rng::new(1);
        let w: Tensor<f32> = rng.normal_tensor(&[12, 5], 1.0);
        let q = crate::quant::quantize(&w, 4, 4).unwrap();
        let dense = AdaptedLinear::dense(q.dequantize(), ModuleTag::Generic).unwrap();
        let quant = AdaptedLinear::new(BaseWeight::Quantized(q), ModuleTag::Generic);
        let x: Tensor<f32> = rng.normal_tensor(&[3, 12], 1.0);
        assert!(quant
            .forward(&x)
            .unwrap()
            .bit_eq(&dense.forward(&x).unwrap()));
    }
}
