use anyhow::Result;
use log::warn;

use diablo_core::model::{check_model_gradients, randomize_adapters, GradCheckOptions, GradTamper};
use diablo_core::oracle::{dense_blockdiag, frobenius_rel, naive_matmul};
use diablo_core::{
    attach_adapters, AdaptedLinear, Adapter, DType, GradCheckReport, Mlp, Model, ModuleTag, Rng,
    Tensor, TinyTransformerBlock,
};

use crate::config::{ConfigError, ExperimentConfig, ModelKind};

/// Agreement required between the batched block-diagonal path and the dense
/// reconstruction, in f64.
pub const DENSE_TOLERANCE: f64 = 1e-10;

/// Results of finite-difference and dense-reconstruction checks.
#[derive(Debug, Clone)]
pub struct GradcheckOutcome {
    pub gradients: GradCheckReport,
    /// Worst Frobenius-relative gap between `x·D` computed both ways.
    pub dense_max_rel: f64,
    pub trials: usize,
    pub vacuous: bool,
}

impl GradcheckOutcome {
    pub fn passed(&self) -> bool {
        self.gradients.passed() && self.dense_max_rel <= DENSE_TOLERANCE
    }
}

fn dense_gap(layer: &AdaptedLinear<f64>, rng: &mut Rng) -> Result<f64> {
    let Some(Adapter::BlockDiagonal(a)) = &layer.adapter else {
        return Ok(0.0);
    };
    let x: Tensor<f64> = rng.normal_tensor(&[3, a.in_features()], 1.0);
    let reference = naive_matmul(&x, &dense_blockdiag(a));
    Ok(frobenius_rel(&a.delta_output(&x)?, &reference))
}

fn check_one<M: Model<f64> + Clone>(
    mut model: M,
    cfg: &ExperimentConfig,
    x: &Tensor<f64>,
    rng: &mut Rng,
    corrupt: Option<GradTamper<'_>>,
) -> Result<(GradCheckReport, f64)> {
    let targets = cfg
        .targets()
        .unwrap_or_else(|| model.module_tags().into_iter().collect());
    attach_adapters(&mut model, cfg.adapter.spec(), &targets, rng)
        .map_err(|e| ConfigError(e.to_string()))?;
    randomize_adapters(&mut model, rng, cfg.gradcheck.param_std);
    let opts = GradCheckOptions {
        step: cfg.gradcheck.step,
        tolerance: cfg.gradcheck.tolerance,
    };
    let report = check_model_gradients(&model, x, opts, corrupt)?;
    let mut gap = 0.0f64;
    for layer in model.linears() {
        gap = gap.max(dense_gap(layer, rng)?);
    }
    Ok((report, gap))
}

/// Runs `gradcheck.trials` random instances of the configured model.
///
/// `corrupt` perturbs the analytic gradient before comparison; it exists so
/// that tests can confirm failures are detected and named.
pub fn run_gradcheck(
    cfg: &ExperimentConfig,
    corrupt: Option<GradTamper<'_>>,
) -> Result<GradcheckOutcome> {
    if cfg.dtype()? != DType::F64 {
        return Err(ConfigError(format!(
            "gradcheck requires dtype = \"f64\" (got {:?}); finite-difference tolerances are undefined in f32",
            cfg.dtype
        ))
        .into());
    }
    let g = &cfg.gradcheck;
    let mut gradients = GradCheckReport::empty(g.tolerance);
    let mut dense_max_rel = 0.0f64;
    let root = Rng::new(cfg.seed);
    for trial in 0..g.trials {
        let mut rng = root.fork(trial as u64);
        let (report, gap) = match cfg.model.kind {
            ModelKind::Linear => {
                let (m1, m2) = (cfg.task.in_features, cfg.task.out_features);
                let layer = AdaptedLinear::random(m1, m2, ModuleTag::Generic, &mut rng);
                let x = rng.normal_tensor(&[g.batch, m1], 1.0);
                check_one(layer, cfg, &x, &mut rng, corrupt)?
            }
            ModelKind::Mlp => {
                let mlp = Mlp::new(&cfg.model.widths, &mut rng)
                    .map_err(|e| ConfigError(e.to_string()))?;
                let x = rng.normal_tensor(&[g.batch, cfg.model.widths[0]], 1.0);
                check_one(mlp, cfg, &x, &mut rng, corrupt)?
            }
            ModelKind::Transformer => {
                let m = &cfg.model;
                let block = TinyTransformerBlock::new(m.hidden, m.ffn, &mut rng)
                    .map_err(|e| ConfigError(e.to_string()))?;
                let x = rng.normal_tensor(&[g.batch, m.seq_len.max(1), m.hidden], 1.0);
                check_one(block, cfg, &x, &mut rng, corrupt)?
            }
        };
        gradients.merge(report);
        dense_max_rel = dense_max_rel.max(gap);
    }
    if gradients.passed() {
        gradients.failing = None;
    }
    Ok(GradcheckOutcome {
        vacuous: gradients.checked == 0,
        gradients,
        dense_max_rel,
        trials: g.trials,
    })
}

pub fn cmd_gradcheck(cfg: &ExperimentConfig, corrupt_first: bool) -> Result<i32> {
    let bump = |g: &mut [f64]| {
        if let Some(v) = g.first_mut() {
            *v += 1.0;
        }
    };
    let outcome = run_gradcheck(cfg, corrupt_first.then_some(&bump as GradTamper<'_>))?;
    if outcome.vacuous {
        warn!("no trainable parameters under the configured targets; nothing to check");
        eprintln!(
            "warning: no trainable parameters under the configured targets; the check is vacuous"
        );
    }
    println!(
        "gradients ({} trials): {}",
        outcome.trials, outcome.gradients
    );
    println!(
        "dense reconstruction: {} max_rel_error={:.3e} tolerance={:.1e}",
        if outcome.dense_max_rel <= DENSE_TOLERANCE {
            "PASS"
        } else {
            "FAIL"
        },
        outcome.dense_max_rel,
        DENSE_TOLERANCE
    );
    Ok(if outcome.passed() { 0 } else { 1 })
}
