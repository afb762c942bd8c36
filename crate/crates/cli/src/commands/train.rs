use std::path::Path;

use anyhow::{Context, Result};
use log::info;

use diablo_core::oracle::{best_subspace_error, Subspace};
use diablo_core::trainer::{
    build_student, make_task, metrics_csv, train, SyntheticTask, TrainOutcome, TrainSummary,
};
use diablo_core::{save_adapters, AdaptedLinear, AdapterSpec, DType, Element};

use crate::config::{ConfigError, ExperimentConfig, ModelKind};

/// Largest side for which the rank floor is computed (Jacobi SVD is cubic).
const MAX_SVD_SIDE: usize = 256;

/// Everything a training run produces, before it is written to disk.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub summary: TrainSummary,
    pub csv: Vec<u8>,
}

/// Expected loss of the best adapter in the student's subspace on a
/// regression task: `‖R - P(R)‖²_F / m₂ + noise²`, where `R` is the teacher
/// weight minus the student base and `P` projects onto the subspace.
/// Relies on standard normal inputs.
pub fn subspace_floor<T: Element>(
    task: &SyntheticTask<T>,
    student: &AdaptedLinear<T>,
    spec: AdapterSpec,
) -> Option<f64> {
    if task.is_classification() {
        return None;
    }
    let resid = task
        .teacher_weight()
        .sub(&student.base.to_dense().cast::<f64>())
        .ok()?;
    let (m1, m2) = (task.in_features(), task.out_features());
    let err = match spec {
        AdapterSpec::None => resid.frobenius(),
        AdapterSpec::Full => 0.0,
        AdapterSpec::BlockDiagonal { num_blocks } => {
            best_subspace_error(&resid, Subspace::BlockDiag(num_blocks))
        }
        AdapterSpec::Lora { rank, .. } if m1.min(m2) <= MAX_SVD_SIDE => {
            best_subspace_error(&resid, Subspace::Rank(rank))
        }
        AdapterSpec::Lora { .. } => return None,
    };
    Some(err * err / m2 as f64 + task.spec.noise * task.spec.noise)
}

fn require_linear(cfg: &ExperimentConfig) -> Result<(), ConfigError> {
    if cfg.model.kind != ModelKind::Linear {
        return Err(ConfigError(format!(
            "train supports model.kind = \"linear\" only, got {:?}",
            cfg.model.kind
        )));
    }
    Ok(())
}

pub(crate) fn run_typed<T: Element>(
    cfg: &ExperimentConfig,
    ckpt: Option<&Path>,
) -> Result<TrainRun> {
    let task = make_task::<T>(&cfg.task_spec()).map_err(|e| ConfigError(e.to_string()))?;
    let spec = cfg.adapter.spec();
    let mut student = build_student(&task, spec, cfg.quant_spec(), cfg.seed)
        .map_err(|e| ConfigError(e.to_string()))?;
    let floor = subspace_floor(&task, &student, spec);
    let outcome = train(&mut student, &task, &cfg.train_config())?;
    let mut summary =
        TrainSummary::from_outcome(&outcome, cfg.steps, student.trainable_parameters());
    summary.floor = floor;
    if let (Some(dir), Some(adapter)) = (ckpt, &student.adapter) {
        save_adapters(dir, &[("layer0".to_string(), adapter)])
            .with_context(|| format!("writing adapter checkpoint to {}", dir.display()))?;
    }
    Ok(TrainRun {
        csv: metrics_csv(&outcome.trace)?,
        outcome,
        summary,
    })
}

/// Trains without touching the filesystem.
pub fn run_training(cfg: &ExperimentConfig) -> Result<TrainRun> {
    require_linear(cfg)?;
    match cfg.dtype()? {
        DType::F32 => run_typed::<f32>(cfg, None),
        DType::F64 => run_typed::<f64>(cfg, None),
    }
}

/// Writes `metrics.csv`, `summary.json` and `adapter/` under `cfg.out_dir`.
///
/// Returns the process exit code: 0 on completion, 1 on divergence.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<i32> {
    require_linear(cfg)?;
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ckpt = out.join("adapter");
    let run = match cfg.dtype()? {
        DType::F32 => run_typed::<f32>(cfg, Some(&ckpt))?,
        DType::F64 => run_typed::<f64>(cfg, Some(&ckpt))?,
    };
    diablo_core::fsio::write_atomic(&out.join("metrics.csv"), &run.csv)?;
    run.summary.write(&out.join("summary.json"))?;
    info!("wrote {}", out.display());

    let s = &run.summary;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6e}"));
    println!(
        "{}: steps {}/{} initial_loss {} final_loss {} best_loss {} floor {}",
        cfg.name,
        s.steps_completed,
        s.steps_requested,
        fmt(s.initial_loss),
        fmt(s.final_loss),
        fmt(s.best_loss),
        fmt(s.floor),
    );
    if s.diverged {
        eprintln!(
            "diverged: {}",
            s.divergence.as_deref().unwrap_or("non-finite loss")
        );
        return Ok(1);
    }
    Ok(0)
}
