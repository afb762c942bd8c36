use super::{AdaptedLinear, AdapterHost, Model, ModuleTag};
use crate::adapters::AdapterGrads;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

#[inline]
pub(crate) fn sigmoid<T: Element>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

#[inline]
pub(crate) fn silu<T: Element>(z: T) -> T {
    z * sigmoid(z)
}

#[inline]
pub(crate) fn silu_grad<T: Element>(z: T) -> T {
    let s = sigmoid(z);
    s * (T::one() + z * (T::one() - s))
}

/// Stack of adapted linear layers with SiLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<AdaptedLinear<T>>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    inputs: Vec<Tensor<T>>,
    pre_activations: Vec<Tensor<T>>,
}

impl<T: Element> Mlp<T> {
    /// Random frozen bases for widths `dims[0] → dims[1] → … → dims[k]`.
    pub fn new(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!(
                "MLP needs at least two positive widths, got {dims:?}"
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| AdaptedLinear::random(w[0], w[1], ModuleTag::Generic, rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<AdaptedLinear<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_features() != pair[1].in_features() {
                return Err(Error::Shape {
                    op: "Mlp::from_layers",
                    left: vec![pair[0].in_features(), pair[0].out_features()],
                    right: vec![pair[1].in_features(), pair[1].out_features()],
                });
            }
        }
        Ok(Self { layers })
    }
}

impl<T: Element> AdapterHost<T> for Mlp<T> {
    fn linears(&self) -> Vec<&AdaptedLinear<T>> {
        self.layers.iter().collect()
    }

    fn linears_mut(&mut self) -> Vec<&mut AdaptedLinear<T>> {
        self.layers.iter_mut().collect()
    }
}

impl<T: Element> Model<T> for Mlp<T> {
    type Cache = MlpCache<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, MlpCache<T>)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len() - 1);
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h)?;
            inputs.push(h);
            if i + 1 == self.layers.len() {
                return Ok((
                    z,
                    MlpCache {
                        inputs,
                        pre_activations,
                    },
                ));
            }
            h = z.map(silu);
            pre_activations.push(z);
        }
        unreachable!("MLP has at least one layer")
    }

    fn backward(
        &self,
        cache: &MlpCache<T>,
        g_y: &Tensor<T>,
    ) -> Result<Vec<Option<AdapterGrads<T>>>> {
        let mut grads = vec![None; self.layers.len()];
        let mut g = g_y.clone();
        for i in (0..self.layers.len()).rev() {
            let lg = self.layers[i].backward(&cache.inputs[i], &g, i > 0)?;
            grads[i] = lg.adapter;
            if let Some(g_x) = lg.input {
                g = g_x.zip_map(&cache.pre_activations[i - 1], |gv, z| gv * silu_grad(z))?;
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silu_derivative_matches_difference_quotient() {
        for &z in &[-3.0f64, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (silu(z + h) - silu(z - h)) / (2.0 * h);
            assert!((fd - silu_grad(z)).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_bad_widths() {
        assert!(Mlp::<f32>::new(&[4], &mut Rng::new(0)).is_err());
        assert!(Mlp::<f32>::new(&[4, 0, 2], &mut Rng::new(0)).is_err());
        let a = AdaptedLinear::<f32>::random(4, 3, ModuleTag::Generic, &mut Rng::new(0));
        let b = AdaptedLinear::<f32>::random(4, 2, ModuleTag::Generic, &mut Rng::new(0));
        assert!(Mlp::from_layers(vec![a, b]).is_err());
    }

    #[test]
    fn output_shape() {
        let mlp = Mlp::<f64>::new(&[5, 7, 3], &mut Rng::new(1)).unwrap();
        let x = Tensor::zeros(&[2, 5]);
        assert_eq!(mlp.predict(&x).unwrap().shape(), &[2, 3]);
    }
}
