use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::optim::{adamw_step, AdamW, LrSchedule, OptimizerState, ScheduleKind};
use super::task::SyntheticTask;
use crate::adapters::AdapterSpec;
use crate::error::{Error, Result};
use crate::model::{attach_adapters, AdaptedLinear, BaseWeight, Model, ModuleTag};
use crate::quant::quantize;
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

const STREAM_ADAPTER: u64 = 0;
const STREAM_BATCH: u64 = 1;

/// Loop settings for [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Rows per step; `0` or anything `>=` the sample count means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub warmup_steps: usize,
    pub schedule: ScheduleKind,
    pub adamw: AdamW,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 64,
            seed: 0,
            lr: 1e-2,
            warmup_steps: 100,
            schedule: ScheduleKind::Linear,
            adamw: AdamW::default(),
        }
    }
}

/// One row of the metrics trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub trace: Vec<StepRecord>,
    /// Full-dataset loss before the first update.
    pub initial_loss: f64,
    /// Full-dataset loss after the last update (NaN after divergence).
    pub final_loss: f64,
    pub best_loss: f64,
    pub diverged: bool,
    /// Why training stopped early, if it did.
    pub divergence: Option<String>,
}

/// Frozen-base quantization for the student.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    pub group_size: usize,
}

/// Single linear student whose frozen base is the task's `W`, with a fresh
/// adapter seeded from `seed`.
pub fn build_student<T: Element>(
    task: &SyntheticTask<T>,
    adapter: AdapterSpec,
    quant: Option<QuantSpec>,
    seed: u64,
) -> Result<AdaptedLinear<T>> {
    let base = match quant {
        None => BaseWeight::Dense(task.base.clone()),
        Some(q) => BaseWeight::Quantized(quantize(&task.base, q.bits, q.group_size)?),
    };
    let mut student = AdaptedLinear::new(base, ModuleTag::Generic);
    let mut rng = Rng::new(seed).fork(STREAM_ADAPTER);
    attach_adapters(&mut student, adapter, &[ModuleTag::Generic], &mut rng)?;
    Ok(student)
}

/// Mean squared error over all elements and its gradient.
pub fn mse_loss<T: Element>(y: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let diff = y.sub(target)?;
    let n = diff.len() as f64;
    let loss = diff.sum_sq() / n;
    Ok((loss, diff.scale(T::from_f64(2.0 / n))))
}

/// Mean softmax cross-entropy over rows and its gradient with respect to the logits.
pub fn cross_entropy_loss<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    let (b, c) = logits.dims2("cross_entropy_loss")?;
    if labels.len() != b || labels.iter().any(|&l| l >= c) {
        return Err(Error::Shape {
            op: "cross_entropy_loss",
            left: vec![b, c],
            right: vec![labels.len()],
        });
    }
    let mut grad = Tensor::zeros(&[b, c]);
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.data()[i * c..(i + 1) * c]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        total += sum.ln() + max - row[label];
        let g = &mut grad.data_mut()[i * c..(i + 1) * c];
        for (j, v) in row.iter().enumerate() {
            let p = (v - max).exp() / sum;
            let onehot = if j == label { 1.0 } else { 0.0 };
            g[j] = T::from_f64((p - onehot) / b as f64);
        }
    }
    Ok((total / b as f64, grad))
}

fn batch_loss<T: Element>(
    task: &SyntheticTask<T>,
    y: &Tensor<T>,
    rows: Option<&[usize]>,
) -> Result<(f64, Tensor<T>)> {
    match &task.labels {
        Some(labels) => match rows {
            Some(r) => cross_entropy_loss(y, &r.iter().map(|&i| labels[i]).collect::<Vec<_>>()),
            None => cross_entropy_loss(y, labels),
        },
        None => match rows {
            Some(r) => mse_loss(y, &task.targets.gather_rows(r)?),
            None => mse_loss(y, &task.targets),
        },
    }
}

/// Loss of `model` on the whole training set.
pub fn evaluate<T: Element, M: Model<T>>(model: &M, task: &SyntheticTask<T>) -> Result<f64> {
    let y = model.predict(&task.inputs)?;
    Ok(batch_loss(task, &y, None)?.0)
}

/// Runs AdamW on the adapter parameters of `model`.
///
/// A non-finite loss or gradient ends the run early with `diverged` set
/// instead of returning an error.
pub fn train<T: Element, M: Model<T>>(
    model: &mut M,
    task: &SyntheticTask<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let first = model.linears()[0].in_features();
    if first != task.in_features() {
        return Err(Error::Shape {
            op: "train",
            left: vec![first],
            right: vec![task.in_features()],
        });
    }
    let initial_loss = evaluate(model, task)?;
    let shapes: Vec<Vec<usize>> = model
        .params_mut()
        .iter()
        .map(|t| t.shape().to_vec())
        .collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let schedule = LrSchedule::new(cfg.lr, cfg.warmup_steps, cfg.steps, cfg.schedule);
    let mut state = OptimizerState::<T>::new(&shape_refs, cfg.adamw, schedule);

    let samples = task.samples();
    let full_batch = cfg.batch_size == 0 || cfg.batch_size >= samples;
    let mut batch_rng = Rng::new(cfg.seed).fork(STREAM_BATCH);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut divergence = None;

    for step in 0..cfg.steps {
        let started = Instant::now();
        let rows: Option<Vec<usize>> = (!full_batch).then(|| {
            (0..cfg.batch_size)
                .map(|_| batch_rng.below(samples as u64) as usize)
                .collect()
        });
        let x = match &rows {
            Some(r) => task.inputs.gather_rows(r)?,
            None => task.inputs.clone(),
        };
        let (y, cache) = model.forward(&x)?;
        let (loss, g_y) = batch_loss(task, &y, rows.as_deref())?;
        if !loss.is_finite() {
            divergence = Some(format!("loss became {loss} at step {step}"));
            break;
        }
        let grads = model.backward(&cache, &g_y)?;
        let flat: Vec<&Tensor<T>> = grads.iter().flatten().flat_map(|g| g.tensors()).collect();
        let grad_norm = flat.iter().map(|t| t.sum_sq()).sum::<f64>().sqrt();
        let mut params = model.params_mut();
        let lr = match adamw_step(&mut params, &flat, &mut state) {
            Ok(lr) => lr,
            Err(Error::NonFinite(msg)) => {
                divergence = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        };
        trace.push(StepRecord {
            step,
            loss,
            grad_norm,
            lr,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    let diverged = divergence.is_some();
    if let Some(msg) = &divergence {
        log::warn!("training diverged: {msg}");
    }
    let final_loss = if diverged {
        f64::NAN
    } else {
        evaluate(model, task)?
    };
    let best_loss = trace
        .iter()
        .map(|r| r.loss)
        .chain([initial_loss, final_loss])
        .filter(|l| l.is_finite())
        .fold(f64::INFINITY, f64::min);
    Ok(TrainOutcome {
        trace,
        initial_loss,
        final_loss,
        best_loss,
        diverged,
        divergence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::task::{make_task, TaskKind, TaskSpec};

    #[test]
    fn zero_steps_gives_base_loss() {
        let task = make_task::<f64>(&TaskSpec::default()).unwrap();
        let mut student =
            build_student(&task, AdapterSpec::BlockDiagonal { num_blocks: 4 }, None, 0).unwrap();
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let out = train(&mut student, &task, &cfg).unwrap();
        assert!(out.trace.is_empty());
        let base = AdaptedLinear::dense(task.base.clone(), ModuleTag::Generic).unwrap();
        assert_eq!(out.initial_loss, evaluate(&base, &task).unwrap());
        assert_eq!(out.final_loss, out.initial_loss);
    }

    #[test]
    fn noiseless_zero_delta_starts_at_zero_loss() {
        let spec = TaskSpec {
            kind: TaskKind::LowrankTeacher,
            rank: 1,
            ..TaskSpec::default()
        };
        let mut task = make_task::<f64>(&spec).unwrap();
        task.delta.fill(0.0);
        task.targets = task.inputs.matmul(&task.base).unwrap();
        for adapter in [
            AdapterSpec::BlockDiagonal { num_blocks: 4 },
            AdapterSpec::Lora {
                rank: 2,
                scaling: 1.0,
            },
        ] {
            let s = build_student(&task, adapter, None, 3).unwrap();
            assert_eq!(evaluate(&s, &task).unwrap(), 0.0);
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_difference_quotient() {
        let logits = Tensor::from_rows(&[vec![0.2, -1.0, 0.7], vec![1.5, 0.1, -0.3]]);
        let labels = [2, 0];
        let (_, g) = cross_entropy_loss(&logits, &labels).unwrap();
        let h = 1e-6;
        for e in 0..6 {
            let mut up = logits.clone();
            up.data_mut()[e] += h;
            let mut down = logits.clone();
            down.data_mut()[e] -= h;
            let fd = (cross_entropy_loss(&up, &labels).unwrap().0
                - cross_entropy_loss(&down, &labels).unwrap().0)
                / (2.0 * h);
            assert!((fd - g.data()[e]).abs() < 1e-8);
        }
    }

    #[test]
    fn huge_lr_diverges_without_error() {
        let task = make_task::<f32>(&TaskSpec::default()).unwrap();
        let mut student = build_student(&task, AdapterSpec::Full, None, 0).unwrap();
        let cfg = TrainConfig {
            steps: 200,
            lr: 3e38,
            warmup_steps: 0,
            schedule: ScheduleKind::Constant,
            ..TrainConfig::default()
        };
        let out = train(&mut student, &task, &cfg).unwrap();
        assert!(out.diverged, "{out:?}");
        assert!(out.trace.len() < 200);
        assert!(out.final_loss.is_nan());
    }

    #[test]
    fn classification_loss_decreases() {
        let spec = TaskSpec {
            kind: TaskKind::Classification,
            out_features: 4,
            samples: 256,
            ..TaskSpec::default()
        };
        let task = make_task::<f64>(&spec).unwrap();
        let mut student =
            build_student(&task, AdapterSpec::BlockDiagonal { num_blocks: 4 }, None, 0).unwrap();
        let cfg = TrainConfig {
            steps: 500,
            ..TrainConfig::default()
        };
        let out = train(&mut student, &task, &cfg).unwrap();
        assert!(
            out.final_loss < 0.8 * out.initial_loss,
            "{} vs {}",
            out.final_loss,
            out.initial_loss
        );
    }
}
