//! On-disk form of a training run: a per-step CSV trace and a JSON summary.
//!
//! Both files are written through [`write_atomic`], so a reader never sees a
//! partially written file under the final name.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{StepRecord, TrainOutcome};
use crate::error::{Error, Result};
use crate::fsio::write_atomic;

pub const METRICS_COLUMNS: [&str; 5] = ["step", "loss", "grad_norm", "lr", "wall_ms"];
/// Columns whose values depend on the machine rather than the seed.
pub const TIMING_COLUMNS: [&str; 1] = ["wall_ms"];

pub fn metrics_csv(trace: &[StepRecord]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Format(format!("metrics csv: {e}"));
    w.write_record(METRICS_COLUMNS).map_err(fail)?;
    for r in trace {
        w.serialize(r).map_err(fail)?;
    }
    w.into_inner()
        .map_err(|e| Error::Format(format!("metrics csv: {e}")))
}

pub fn write_metrics_csv(path: &Path, trace: &[StepRecord]) -> Result<()> {
    write_atomic(path, &metrics_csv(trace)?)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// CSV text with the timing columns removed, for run-to-run comparison.
pub fn without_timing_columns(csv_text: &str) -> Result<String> {
    let fail = |e: csv::Error| Error::Format(format!("metrics csv: {e}"));
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(csv_text.as_bytes());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut keep: Option<Vec<bool>> = None;
    for rec in r.records() {
        let rec = rec.map_err(fail)?;
        let mask =
            keep.get_or_insert_with(|| rec.iter().map(|h| !TIMING_COLUMNS.contains(&h)).collect());
        w.write_record(
            rec.iter()
                .zip(mask.iter())
                .filter(|(_, k)| **k)
                .map(|(f, _)| f),
        )
        .map_err(fail)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Format(format!("metrics csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// Headline numbers of a run. Non-finite losses serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps_requested: usize,
    pub steps_completed: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub best_loss: Option<f64>,
    pub diverged: bool,
    pub divergence: Option<String>,
    pub trainable_params: usize,
    /// Best loss reachable inside the adapter's subspace, when known.
    pub floor: Option<f64>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl TrainSummary {
    pub fn from_outcome(
        outcome: &TrainOutcome,
        steps_requested: usize,
        trainable_params: usize,
    ) -> Self {
        Self {
            steps_requested,
            steps_completed: outcome.trace.len(),
            initial_loss: finite(outcome.initial_loss),
            final_loss: finite(outcome.final_loss),
            best_loss: finite(outcome.best_loss),
            diverged: outcome.diverged,
            divergence: outcome.divergence.clone(),
            trainable_params,
            floor: None,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text =
            serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}
