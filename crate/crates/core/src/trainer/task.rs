use serde::{Deserialize, Serialize};

use crate::adapters::BlockLayout;
use crate::error::{Error, Result};
use crate::oracle::{dense_blockdiag, naive_matmul};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// `y = x·(W + Δ)` with a block-diagonal `Δ`.
    #[default]
    BlockdiagTeacher,
    /// `y = x·(W + Δ)` with `Δ` of exact rank `r`.
    LowrankTeacher,
    /// Labels from Gaussian clusters, one cluster per output logit.
    Classification,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::BlockdiagTeacher => "blockdiag_teacher",
            TaskKind::LowrankTeacher => "lowrank_teacher",
            TaskKind::Classification => "classification",
        }
    }
}

/// Parameters for [`make_task`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub in_features: usize,
    pub out_features: usize,
    /// Block count of the teacher delta (blockdiag_teacher).
    pub num_blocks: usize,
    /// Rank of the teacher delta (lowrank_teacher).
    pub rank: usize,
    /// Standard deviation of additive target noise.
    pub noise: f64,
    /// Size of the fixed training set.
    pub samples: usize,
    /// Distance scale between class means (classification).
    pub separation: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::BlockdiagTeacher,
            in_features: 16,
            out_features: 16,
            num_blocks: 4,
            rank: 4,
            noise: 0.0,
            samples: 512,
            separation: 2.0,
            seed: 0,
        }
    }
}

/// Generated training data together with the teacher that produced it.
#[derive(Debug, Clone)]
pub struct SyntheticTask<T> {
    pub spec: TaskSpec,
    /// Frozen base shared by teacher and student.
    pub base: Tensor<T>,
    /// Teacher delta; zero for classification.
    pub delta: Tensor<T>,
    pub inputs: Tensor<T>,
    /// Regression targets; for classification, one-hot rows.
    pub targets: Tensor<T>,
    /// Class labels (classification only).
    pub labels: Option<Vec<usize>>,
}

impl<T: Element> SyntheticTask<T> {
    pub fn in_features(&self) -> usize {
        self.spec.in_features
    }

    pub fn out_features(&self) -> usize {
        self.spec.out_features
    }

    pub fn samples(&self) -> usize {
        self.spec.samples
    }

    pub fn is_classification(&self) -> bool {
        self.spec.kind == TaskKind::Classification
    }

    /// `W + Δ` in f64.
    pub fn teacher_weight(&self) -> Tensor<f64> {
        self.base
            .cast::<f64>()
            .add(&self.delta.cast())
            .expect("teacher shapes agree")
    }
}

// Separate streams so that changing one component leaves the others intact.
const STREAM_BASE: u64 = 0;
const STREAM_DELTA: u64 = 1;
const STREAM_INPUTS: u64 = 2;
const STREAM_NOISE: u64 = 3;

pub fn make_task<T: Element>(spec: &TaskSpec) -> Result<SyntheticTask<T>> {
    let (m1, m2, n) = (spec.in_features, spec.out_features, spec.samples);
    if m1 == 0 || m2 == 0 || n == 0 {
        return Err(Error::Config(format!(
            "task dimensions must be positive: in_features={m1} out_features={m2} samples={n}"
        )));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::Config(format!(
            "task noise must be finite and >= 0, got {}",
            spec.noise
        )));
    }
    let root = Rng::new(spec.seed);
    let base: Tensor<T> = root
        .fork(STREAM_BASE)
        .normal_tensor(&[m1, m2], 1.0 / (m1 as f64).sqrt());
    let mut drng = root.fork(STREAM_DELTA);
    let mut irng = root.fork(STREAM_INPUTS);

    if spec.kind == TaskKind::Classification {
        if m2 < 2 {
            return Err(Error::Config(
                "classification needs out_features >= 2 classes".into(),
            ));
        }
        let means: Tensor<f64> =
            drng.normal_tensor(&[m2, m1], spec.separation / (m1 as f64).sqrt());
        let mut labels = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n * m1);
        for _ in 0..n {
            let c = irng.below(m2 as u64) as usize;
            labels.push(c);
            for k in 0..m1 {
                x.push(T::from_f64(means.get(&[c, k]) + irng.normal()));
            }
        }
        let targets = Tensor::from_fn(&[n, m2], |e| {
            if labels[e / m2] == e % m2 {
                T::one()
            } else {
                T::zero()
            }
        });
        return Ok(SyntheticTask {
            spec: spec.clone(),
            base,
            delta: Tensor::zeros(&[m1, m2]),
            inputs: Tensor::new(vec![n, m1], x)?,
            targets,
            labels: Some(labels),
        });
    }

    let delta64 = match spec.kind {
        TaskKind::BlockdiagTeacher => {
            let layout = BlockLayout::new(m1, m2, spec.num_blocks)?;
            let blocks = drng.normal_tensor::<f64>(
                &[layout.num_blocks, layout.block_rows, layout.block_cols],
                1.0 / (layout.block_rows as f64).sqrt(),
            );
            let adapter = crate::adapters::BlockDiagonalAdapter::from_blocks(blocks, m1, m2)?;
            dense_blockdiag(&adapter)
        }
        TaskKind::LowrankTeacher => {
            let r = spec.rank;
            if r == 0 || r > m1.min(m2) {
                return Err(Error::Config(format!(
                    "lowrank_teacher rank must be in 1..={}, got {r}",
                    m1.min(m2)
                )));
            }
            let p: Tensor<f64> = drng.normal_tensor(&[m1, r], 1.0);
            let q: Tensor<f64> = drng.normal_tensor(&[r, m2], 1.0 / ((r * m1) as f64).sqrt());
            naive_matmul(&p, &q)
        }
        TaskKind::Classification => unreachable!(),
    };
    let delta: Tensor<T> = delta64.cast();
    let inputs: Tensor<T> = irng.normal_tensor(&[n, m1], 1.0);
    let teacher = base.cast::<f64>().add(&delta64)?;
    let mut y = naive_matmul(&inputs.cast::<f64>(), &teacher);
    if spec.noise > 0.0 {
        let mut nrng = root.fork(STREAM_NOISE);
        for v in y.data_mut() {
            *v += spec.noise * nrng.normal();
        }
    }
    Ok(SyntheticTask {
        spec: spec.clone(),
        base,
        delta,
        inputs,
        targets: y.cast(),
        labels: None,
    })
}
