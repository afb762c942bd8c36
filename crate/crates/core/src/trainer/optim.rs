use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Linear warmup, then linear decay to zero at the final step.
    #[default]
    Linear,
    /// Linear warmup, then flat.
    Constant,
}

/// Learning rate as a function of the 0-based step index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub kind: ScheduleKind,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_steps: usize, total_steps: usize, kind: ScheduleKind) -> Self {
        Self {
            base_lr,
            warmup_steps,
            total_steps,
            kind,
        }
    }

    pub fn constant(lr: f64) -> Self {
        Self::new(lr, 0, 0, ScheduleKind::Constant)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        match self.kind {
            ScheduleKind::Constant => self.base_lr,
            ScheduleKind::Linear => {
                let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
                let left = self.total_steps.saturating_sub(step);
                self.base_lr * left as f64 / span as f64
            }
        }
    }
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates for a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub hyper: AdamW,
    pub schedule: LrSchedule,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: usize,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(shapes: &[&[usize]], hyper: AdamW, schedule: LrSchedule) -> Self {
        Self {
            hyper,
            schedule,
            first: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
        }
    }

    /// Number of completed updates.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.second
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
///
/// Returns the learning rate that was applied. Non-finite gradients abort the
/// step before any state is touched.
pub fn adamw_step<T: Element>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut OptimizerState<T>,
) -> Result<f64> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::Shape {
            op: "adamw_step",
            left: vec![params.len(), state.first.len()],
            right: vec![grads.len()],
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() {
            return Err(Error::Shape {
                op: "adamw_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if let Some(k) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of parameter {i} is {} at element {k}; step {} skipped",
                g.data()[k],
                state.step
            )));
        }
    }

    let lr = state.schedule.lr_at(state.step);
    state.step += 1;
    let AdamW {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.hyper;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
    let decay = 1.0 - lr * weight_decay;

    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (k, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gk = gv.as_f64();
            let mk = beta1 * m[k].as_f64() + (1.0 - beta1) * gk;
            let vk = beta2 * v[k].as_f64() + (1.0 - beta2) * gk * gk;
            m[k] = T::from_f64(mk);
            v[k] = T::from_f64(vk);
            let update = lr * (mk / c1) / ((vk / c2).sqrt() + eps);
            *pv = T::from_f64(pv.as_f64() * decay - update);
        }
    }
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(lr: f64, wd: f64) -> OptimizerState<f64> {
        let hyper = AdamW {
            weight_decay: wd,
            ..AdamW::default()
        };
        OptimizerState::new(&[&[1]], hyper, LrSchedule::constant(lr))
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = Tensor::from_rows(&[vec![1.5f64, -2.0]]);
        let g = Tensor::zeros(&[1, 2]);
        let mut st = OptimizerState::new(&[&[1, 2]], AdamW::default(), LrSchedule::constant(0.1));
        for _ in 0..5 {
            adamw_step(&mut [&mut p], &[&g], &mut st).unwrap();
        }
        assert_eq!(p.data(), &[1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::new(vec![1], vec![0.0f64]).unwrap();
        let g = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut st = scalar_state(0.1, 0.0);
        adamw_step(&mut [&mut p], &[&g], &mut st).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay_shrinks_geometrically() {
        let mut p = Tensor::new(vec![1], vec![2.0f64]).unwrap();
        let g = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut st = scalar_state(0.1, 0.5);
        for k in 1..=3 {
            adamw_step(&mut [&mut p], &[&g], &mut st).unwrap();
            assert!((p.data()[0] - 2.0 * 0.95f64.powi(k)).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = Tensor::new(vec![1], vec![1.0f64]).unwrap();
        let g = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        let mut st = scalar_state(0.1, 0.0);
        let err = adamw_step(&mut [&mut p], &[&g], &mut st).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(st.step(), 0);
        assert_eq!(p.data()[0], 1.0);
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule::new(1.0, 4, 12, ScheduleKind::Linear);
        let lrs: Vec<f64> = (0..12).map(|t| s.lr_at(t)).collect();
        assert_eq!(&lrs[..5], &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(lrs[8], 0.5);
        assert_eq!(s.lr_at(12), 0.0);
        let c = LrSchedule::new(1.0, 2, 12, ScheduleKind::Constant);
        assert_eq!((c.lr_at(1), c.lr_at(11)), (0.5, 1.0));
    }
}
