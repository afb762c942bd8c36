use super::Model;
use crate::error::{Error, Result};
use crate::oracle::{compare_grads, finite_diff_grad, GradCheckReport, DEFAULT_FD_STEP};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Hook that perturbs a flattened analytic gradient before comparison.
pub type GradTamper<'a> = &'a dyn Fn(&mut [f64]);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_FD_STEP,
            tolerance: 1e-4,
        }
    }
}

/// All adapter parameters in layer order, with names like `layer1.Q.blocks[3]`.
pub fn flat_params<M: Model<f64>>(model: &M) -> (Vec<f64>, Vec<String>) {
    let mut values = Vec::new();
    let mut names = Vec::new();
    for (i, layer) in model.linears().iter().enumerate() {
        let Some(adapter) = &layer.adapter else {
            continue;
        };
        for (t, pname) in adapter.params().iter().zip(adapter.param_names()) {
            for (k, v) in t.data().iter().enumerate() {
                values.push(*v);
                names.push(format!("layer{i}.{}.{pname}[{k}]", layer.tag));
            }
        }
    }
    (values, names)
}

/// Inverse of [`flat_params`].
pub fn set_flat_params<M: Model<f64>>(model: &mut M, values: &[f64]) -> Result<()> {
    let mut params = model.params_mut();
    let total: usize = params.iter().map(|t| t.len()).sum();
    if total != values.len() {
        return Err(Error::DataLength {
            shape: vec![total],
            len: values.len(),
        });
    }
    let mut offset = 0;
    for t in params.iter_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
    Ok(())
}

/// Overwrites every adapter parameter with `N(0, std²)` draws.
///
/// Zero-initialised adapters make some gradients vanish identically, which
/// would let a broken backward pass slip through the check.
pub fn randomize_adapters<M: Model<f64>>(model: &mut M, rng: &mut Rng, std: f64) {
    for t in model.params_mut() {
        for v in t.data_mut() {
            *v = rng.normal() * std;
        }
    }
}

fn half_sq_loss<M: Model<f64>>(model: &M, x: &Tensor<f64>) -> Result<(f64, Tensor<f64>, M::Cache)> {
    let (y, cache) = model.forward(x)?;
    Ok((0.5 * y.sum_sq(), y, cache))
}

/// Compares the model's backward pass with central differences of `½‖f(x)‖²`.
///
/// `corrupt` is applied to the flattened analytic gradient before comparison;
/// pass `None` in normal use.
pub fn check_model_gradients<M: Model<f64> + Clone>(
    model: &M,
    x: &Tensor<f64>,
    options: GradCheckOptions,
    corrupt: Option<GradTamper<'_>>,
) -> Result<GradCheckReport> {
    let (theta, names) = flat_params(model);
    if theta.is_empty() {
        return Ok(GradCheckReport::empty(options.tolerance));
    }
    let (_, y, cache) = half_sq_loss(model, x)?;
    let grads = model.backward(&cache, &y)?;
    let mut analytic: Vec<f64> = grads
        .iter()
        .flatten()
        .flat_map(|g| {
            g.tensors()
                .into_iter()
                .flat_map(|t| t.data().iter().copied())
        })
        .collect();
    if analytic.len() != theta.len() {
        return Err(Error::DataLength {
            shape: vec![theta.len()],
            len: analytic.len(),
        });
    }
    if let Some(f) = corrupt {
        f(&mut analytic);
    }

    let mut probe = model.clone();
    let mut failure = None;
    let numeric = finite_diff_grad(
        |t| {
            let r = set_flat_params(&mut probe, t).and_then(|_| half_sq_loss(&probe, x));
            match r {
                Ok((loss, _, _)) => loss,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &theta,
        options.step,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(compare_grads(
        &analytic,
        &numeric,
        &names,
        options.tolerance,
    ))
}
