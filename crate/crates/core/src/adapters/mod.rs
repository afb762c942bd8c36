//! Trainable additive updates for a frozen linear layer `Y = X·W`.
//!
//! Every adapter computes `Y = X·W + X·Δ` for some structured `Δ`:
//!
//! - [`BlockDiagonalAdapter`]: `Δ` is block diagonal with `N` blocks of
//!   `d₁×d₂`, trained directly and initialized to zero.
//! - [`LoraAdapter`]: `Δ = s·A·B` with rank `r`.
//! - [`FullDeltaAdapter`]: `Δ` is a dense `m₁×m₂` matrix (full fine-tuning
//!   expressed as an adapter).
//!
//! Forward and backward never form `Δ` densely except for the full-delta
//! baseline. [`merge_adapter`] folds a trained update into the base weight.

mod checkpoint;
mod diablo;
mod lora;

pub use checkpoint::{load_adapters, save_adapters, AdapterEntry, AdapterManifest, ADAPTER_FORMAT};
pub use diablo::{init_diablo, BlockDiagonalAdapter, BlockLayout};
pub use lora::LoraAdapter;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{matmul_nt, matmul_tn, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdapterKind {
    BlockDiagonal,
    Lora,
    Full,
}

impl AdapterKind {
    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::BlockDiagonal => "diablo",
            AdapterKind::Lora => "lora",
            AdapterKind::Full => "full",
        }
    }
}

/// What to attach to a layer; `None` leaves it frozen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdapterSpec {
    None,
    BlockDiagonal { num_blocks: usize },
    Lora { rank: usize, scaling: f64 },
    Full,
}

impl AdapterSpec {
    /// Builds a freshly initialized adapter for an `m₁×m₂` layer.
    pub fn build<T: Element>(
        &self,
        in_features: usize,
        out_features: usize,
        rng: &mut Rng,
    ) -> Result<Option<Adapter<T>>> {
        Ok(match *self {
            AdapterSpec::None => None,
            AdapterSpec::BlockDiagonal { num_blocks } => Some(Adapter::BlockDiagonal(init_diablo(
                in_features,
                out_features,
                num_blocks,
            )?)),
            AdapterSpec::Lora { rank, scaling } => Some(Adapter::Lora(LoraAdapter::new(
                in_features,
                out_features,
                rank,
                scaling,
                rng,
            )?)),
            AdapterSpec::Full => Some(Adapter::Full(FullDeltaAdapter::new(
                in_features,
                out_features,
            )?)),
        })
    }
}

/// Dense trainable delta, zero-initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct FullDeltaAdapter<T> {
    delta: Tensor<T>,
}

impl<T: Element> FullDeltaAdapter<T> {
    pub fn new(in_features: usize, out_features: usize) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(Error::Config("full delta needs positive sizes".into()));
        }
        Ok(Self {
            delta: Tensor::zeros(&[in_features, out_features]),
        })
    }

    pub fn from_delta(delta: Tensor<T>) -> Result<Self> {
        delta.dims2("FullDeltaAdapter::from_delta")?;
        Ok(Self { delta })
    }

    pub fn delta(&self) -> &Tensor<T> {
        &self.delta
    }

    pub fn delta_mut(&mut self) -> &mut Tensor<T> {
        &mut self.delta
    }
}

/// Gradients with the same layout as the owning adapter's parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum AdapterGrads<T> {
    BlockDiagonal { blocks: Tensor<T> },
    Lora { a: Tensor<T>, b: Tensor<T> },
    Full { delta: Tensor<T> },
}

impl<T: Element> AdapterGrads<T> {
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        match self {
            AdapterGrads::BlockDiagonal { blocks } => vec![blocks],
            AdapterGrads::Lora { a, b } => vec![a, b],
            AdapterGrads::Full { delta } => vec![delta],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            AdapterGrads::BlockDiagonal { blocks } => vec![blocks],
            AdapterGrads::Lora { a, b } => vec![a, b],
            AdapterGrads::Full { delta } => vec![delta],
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.tensors().iter().map(|t| t.sum_sq()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Adapter<T> {
    BlockDiagonal(BlockDiagonalAdapter<T>),
    Lora(LoraAdapter<T>),
    Full(FullDeltaAdapter<T>),
}

impl<T: Element> Adapter<T> {
    pub fn kind(&self) -> AdapterKind {
        match self {
            Adapter::BlockDiagonal(_) => AdapterKind::BlockDiagonal,
            Adapter::Lora(_) => AdapterKind::Lora,
            Adapter::Full(_) => AdapterKind::Full,
        }
    }

    pub fn in_features(&self) -> usize {
        match self {
            Adapter::BlockDiagonal(a) => a.in_features(),
            Adapter::Lora(a) => a.in_features(),
            Adapter::Full(a) => a.delta.shape()[0],
        }
    }

    pub fn out_features(&self) -> usize {
        match self {
            Adapter::BlockDiagonal(a) => a.out_features(),
            Adapter::Lora(a) => a.out_features(),
            Adapter::Full(a) => a.delta.shape()[1],
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Adapter::BlockDiagonal(a) => vec![a.blocks()],
            Adapter::Lora(a) => vec![a.a(), a.b()],
            Adapter::Full(a) => vec![&a.delta],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Adapter::BlockDiagonal(a) => vec![a.blocks_mut()],
            Adapter::Lora(a) => {
                let (a, b) = a.factors_mut();
                vec![a, b]
            }
            Adapter::Full(a) => vec![&mut a.delta],
        }
    }

    /// Names of the trainable tensors, aligned with [`Adapter::params`].
    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            Adapter::BlockDiagonal(_) => &["blocks"],
            Adapter::Lora(_) => &["a", "b"],
            Adapter::Full(_) => &["delta"],
        }
    }

    /// Adapter contribution `X·Δ` alone.
    pub fn delta_output(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Adapter::BlockDiagonal(a) => a.delta_output(x),
            Adapter::Lora(a) => a.delta_output(x),
            Adapter::Full(a) => x.matmul(&a.delta),
        }
    }

    /// `w_out + X·Δ`.
    pub fn forward(&self, x: &Tensor<T>, w_out: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Adapter::BlockDiagonal(a) => a.forward(x, w_out),
            Adapter::Lora(a) => a.forward(x, w_out),
            Adapter::Full(a) => w_out.add(&x.matmul(&a.delta)?),
        }
    }

    pub fn param_grads(&self, x: &Tensor<T>, g_y: &Tensor<T>) -> Result<AdapterGrads<T>> {
        Ok(match self {
            Adapter::BlockDiagonal(a) => AdapterGrads::BlockDiagonal {
                blocks: a.param_grads(x, g_y)?,
            },
            Adapter::Lora(l) => {
                let (a, b) = l.param_grads(x, g_y)?;
                AdapterGrads::Lora { a, b }
            }
            Adapter::Full(_) => AdapterGrads::Full {
                delta: matmul_tn(x, g_y)?,
            },
        })
    }

    pub fn input_grad(&self, g_y: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Adapter::BlockDiagonal(a) => a.input_grad(g_y),
            Adapter::Lora(a) => a.input_grad(g_y),
            Adapter::Full(a) => matmul_nt(g_y, &a.delta),
        }
    }

    /// Parameter gradients plus the adapter-path input gradient.
    pub fn backward(&self, x: &Tensor<T>, g_y: &Tensor<T>) -> Result<(AdapterGrads<T>, Tensor<T>)> {
        Ok((self.param_grads(x, g_y)?, self.input_grad(g_y)?))
    }

    pub fn dense_delta(&self) -> Tensor<T> {
        match self {
            Adapter::BlockDiagonal(a) => a.dense_delta(),
            Adapter::Lora(a) => a.dense_delta(),
            Adapter::Full(a) => a.delta.clone(),
        }
    }

    pub fn zero_grads(&self) -> AdapterGrads<T> {
        match self {
            Adapter::BlockDiagonal(a) => AdapterGrads::BlockDiagonal {
                blocks: Tensor::zeros(a.blocks().shape()),
            },
            Adapter::Lora(l) => AdapterGrads::Lora {
                a: Tensor::zeros(l.a().shape()),
                b: Tensor::zeros(l.b().shape()),
            },
            Adapter::Full(f) => AdapterGrads::Full {
                delta: Tensor::zeros(f.delta.shape()),
            },
        }
    }
}

/// `W + Δ`: folds the adapter into a dense base weight.
pub fn merge_adapter<T: Element>(w: &Tensor<T>, adapter: &Adapter<T>) -> Result<Tensor<T>> {
    let (m1, m2) = w.dims2("merge_adapter")?;
    if (m1, m2) != (adapter.in_features(), adapter.out_features()) {
        return Err(Error::Shape {
            op: "merge_adapter",
            left: w.shape().to_vec(),
            right: vec![adapter.in_features(), adapter.out_features()],
        });
    }
    w.add(&adapter.dense_delta())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_adapter_merge_is_identity() {
        let w = Tensor::<f32>::from_fn(&[6, 4], |i| i as f32 * 0.1);
        let a = AdapterSpec::BlockDiagonal { num_blocks: 2 }
            .build::<f32>(6, 4, &mut Rng::new(0))
            .unwrap()
            .unwrap();
        assert!(merge_adapter(&w, &a).unwrap().bit_eq(&w));
    }

    #[test]
    fn diablo_merge_touches_only_diagonal_blocks() {
        let w = Tensor::<f64>::from_fn(&[6, 4], |i| i as f64);
        let mut ad = init_diablo::<f64>(6, 4, 2).unwrap();
        ad.blocks_mut().fill(1.0);
        let merged = merge_adapter(&w, &Adapter::BlockDiagonal(ad)).unwrap();
        for i in 0..6 {
            for j in 0..4 {
                let in_block = i / 3 == j / 2;
                let changed = merged.get(&[i, j]) != w.get(&[i, j]);
                assert_eq!(in_block, changed, "entry ({i},{j})");
            }
        }
    }

    #[test]
    fn merge_rejects_wrong_shape() {
        let w = Tensor::<f32>::zeros(&[4, 4]);
        let a = AdapterSpec::Full
            .build::<f32>(4, 5, &mut Rng::new(0))
            .unwrap()
            .unwrap();
        assert!(merge_adapter(&w, &a).is_err());
    }

    #[test]
    fn full_delta_grads_are_dense_outer_products() {
        let a = Adapter::Full(FullDeltaAdapter::<f64>::new(2, 3).unwrap());
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]);
        let g = Tensor::from_rows(&[vec![1.0, 0.0, -1.0]]);
        let AdapterGrads::Full { delta } = a.param_grads(&x, &g).unwrap() else {
            panic!("wrong grads kind");
        };
        assert_eq!(delta.data(), &[1.0, 0.0, -1.0, 2.0, 0.0, -2.0]);
    }

    #[test]
    fn param_names_align_with_params() {
        let mut rng = Rng::new(4);
        for spec in [
            AdapterSpec::BlockDiagonal { num_blocks: 2 },
            AdapterSpec::Lora {
                rank: 2,
                scaling: 0.5,
            },
            AdapterSpec::Full,
        ] {
            let a = spec.build::<f32>(4, 6, &mut rng).unwrap().unwrap();
            assert_eq!(a.param_names().len(), a.params().len());
            assert_eq!(a.zero_grads().tensors().len(), a.params().len());
        }
        assert!(AdapterSpec::None
            .build::<f32>(4, 6, &mut rng)
            .unwrap()
            .is_none());
    }
}
