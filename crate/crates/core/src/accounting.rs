//! Closed-form trainable-parameter and adapter-FLOP counts from layer shapes.
//!
//! FLOPs count one multiply-add as 2. The `*_macs` fields carry the same
//! quantity in multiply-adds.

use serde::Serialize;

use crate::adapters::BlockLayout;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModuleTag};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub model: String,
    pub method: String,
    pub targets: Vec<ModuleTag>,
    pub targeted_layers: usize,
    pub trainable_params: u64,
    pub total_params: u64,
    /// `trainable_params / total_params`.
    pub fraction: f64,
    /// Adapter path only.
    pub forward_flops_per_token: u64,
    pub forward_macs_per_token: u64,
    /// All linear projections of the frozen model.
    pub forward_flops_base: u64,
}

impl CostReport {
    pub fn percent(&self) -> f64 {
        100.0 * self.fraction
    }
}

fn tally(
    config: &ModelConfig,
    targets: &[ModuleTag],
    method: String,
    per_layer: impl Fn(usize, usize) -> Result<u64>,
) -> Result<CostReport> {
    config.validate()?;
    config.check_targets(targets)?;
    let mut params = 0u64;
    let mut layers = 0usize;
    for m in config.modules.iter().filter(|m| targets.contains(&m.tag)) {
        params += per_layer(m.in_features, m.out_features)?;
        layers += 1;
    }
    let params = params * config.num_layers as u64;
    let total = config.total();
    let mut tags: Vec<ModuleTag> = targets.to_vec();
    tags.sort();
    tags.dedup();
    Ok(CostReport {
        model: config.name.clone(),
        method,
        targets: tags,
        targeted_layers: layers * config.num_layers,
        trainable_params: params,
        total_params: total,
        fraction: params as f64 / total as f64,
        // Each adapter parameter takes part in exactly one multiply-add per token.
        forward_flops_per_token: 2 * params,
        forward_macs_per_token: params,
        forward_flops_base: 2 * config.linear_params(),
    })
}

/// Block-diagonal adapters with `N` blocks on every targeted projection.
pub fn count_diablo(
    config: &ModelConfig,
    num_blocks: usize,
    targets: &[ModuleTag],
) -> Result<CostReport> {
    if num_blocks == 0 {
        return Err(Error::Config("num_blocks must be at least 1".into()));
    }
    tally(
        config,
        targets,
        format!("diablo N={num_blocks}"),
        |m1, m2| Ok(BlockLayout::new(m1, m2, num_blocks)?.num_params() as u64),
    )
}

/// Rank-`r` low-rank adapters on every targeted projection.
pub fn count_lora(config: &ModelConfig, rank: usize, targets: &[ModuleTag]) -> Result<CostReport> {
    if rank == 0 {
        return Err(Error::Config("LoRA rank must be at least 1".into()));
    }
    tally(config, targets, format!("lora r={rank}"), |m1, m2| {
        Ok((rank * (m1 + m2)) as u64)
    })
}

/// Dense trainable deltas on every targeted projection.
pub fn count_full(config: &ModelConfig, targets: &[ModuleTag]) -> Result<CostReport> {
    tally(
        config,
        targets,
        "full".into(),
        |m1, m2| Ok((m1 * m2) as u64),
    )
}

/// Comparison of one square `m×m` layer under both adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParityReport {
    pub m: usize,
    pub num_blocks: usize,
    pub rank: usize,
    pub block_size: usize,
    pub diablo_params: u64,
    pub lora_params: u64,
    pub diablo_flops: u64,
    pub lora_flops: u64,
    /// `N·d² == 2·m·r`.
    pub parity: bool,
}

impl ParityReport {
    pub fn flops_equal(&self) -> bool {
        self.diablo_flops == self.lora_flops
    }
}

/// Counts both adapters on a single square layer through the general
/// counting path. Requires `N | m`.
pub fn parity_check(m: usize, num_blocks: usize, rank: usize) -> Result<ParityReport> {
    if num_blocks == 0 || !m.is_multiple_of(num_blocks) {
        return Err(Error::Config(format!(
            "parity check needs N | m, got m={m} N={num_blocks}"
        )));
    }
    let layer = ModelConfig {
        name: format!("square-{m}"),
        num_layers: 1,
        modules: vec![crate::model::ModuleShape {
            tag: ModuleTag::Generic,
            in_features: m,
            out_features: m,
        }],
        hidden_size: 0,
        vocab_size: 0,
        tied_embeddings: false,
        norms_per_layer: 0,
        final_norm: false,
        total_params: Some((m * m) as u64),
        source: None,
    };
    let d = count_diablo(&layer, num_blocks, &[ModuleTag::Generic])?;
    let l = count_lora(&layer, rank, &[ModuleTag::Generic])?;
    let block = m / num_blocks;
    let parity = (num_blocks * block * block) as u64 == (2 * m * rank) as u64;
    Ok(ParityReport {
        m,
        num_blocks,
        rank,
        block_size: block,
        diablo_params: d.trainable_params,
        lora_params: l.trainable_params,
        diablo_flops: d.forward_flops_per_token,
        lora_flops: l.forward_flops_per_token,
        parity,
    })
}

/// Every `(m, N, r)` with `m` a power of two in `[m_min, m_max]`, `N | m`, and
/// an integer `r` satisfying `N·d² = 2·m·r`.
pub fn parity_sweep(m_min: usize, m_max: usize) -> Result<Vec<ParityReport>> {
    let mut out = Vec::new();
    let mut m = m_min.max(1).next_power_of_two();
    while m <= m_max {
        for n in (1..=m).filter(|n| m.is_multiple_of(*n)) {
            let d = m / n;
            // N·d² = m·d, so r = d/2.
            if d.is_multiple_of(2) {
                out.push(parity_check(m, n, d / 2)?);
            }
        }
        m *= 2;
    }
    Ok(out)
}
