use anyhow::Result;
use log::info;

use diablo_core::trainer::TrainOutcome;

use super::train::run_training;
use crate::config::ExperimentConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchEntry {
    pub name: String,
    pub method: String,
    pub trainable_params: usize,
    /// Per-step time of each timed run, milliseconds.
    pub runs_ms: Vec<f64>,
    pub median_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub entries: Vec<BenchEntry>,
    pub repeats: usize,
    /// Median of the first config over the second; `None` for a single config.
    pub ratio: Option<f64>,
    pub low_confidence: bool,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn step_ms(outcome: &TrainOutcome) -> f64 {
    let total: f64 = outcome.trace.iter().map(|r| r.wall_ms).sum();
    total / outcome.trace.len().max(1) as f64
}

fn method(cfg: &ExperimentConfig) -> String {
    use crate::config::AdapterChoice::*;
    match cfg.adapter.kind {
        Diablo => format!("diablo N={}", cfg.adapter.num_blocks),
        Lora => format!("lora r={}", cfg.adapter.rank),
        Full => "full".into(),
        None => "none".into(),
    }
}

/// Times each config: `bench.warmup_runs` untimed runs, then `repeats`
/// timed ones. Step time excludes task generation and model setup.
///
/// All kernels are single-threaded, so every measurement runs on one thread.
pub fn run_bench(configs: &[ExperimentConfig], repeats: usize) -> Result<BenchReport> {
    let repeats = repeats.max(1);
    let mut entries = Vec::with_capacity(configs.len());
    for cfg in configs {
        for _ in 0..cfg.bench.warmup_runs {
            run_training(cfg)?;
        }
        let mut runs_ms = Vec::with_capacity(repeats);
        let mut params = 0;
        for r in 0..repeats {
            let run = run_training(cfg)?;
            params = run.summary.trainable_params;
            runs_ms.push(step_ms(&run.outcome));
            info!("{} run {r}: {:.4} ms/step", cfg.name, runs_ms[r]);
        }
        entries.push(BenchEntry {
            name: cfg.name.clone(),
            method: method(cfg),
            trainable_params: params,
            median_ms: median(&runs_ms),
            runs_ms,
        });
    }
    let ratio = (entries.len() >= 2).then(|| entries[0].median_ms / entries[1].median_ms);
    Ok(BenchReport {
        entries,
        repeats,
        ratio,
        low_confidence: repeats == 1,
    })
}

pub fn render(report: &BenchReport) -> String {
    let mut out = format!(
        "{:<24} {:<16} {:>12} {:>14}\n",
        "config", "method", "params", "median ms/step"
    );
    for e in &report.entries {
        out.push_str(&format!(
            "{:<24} {:<16} {:>12} {:>14.4}\n",
            e.name, e.method, e.trainable_params, e.median_ms
        ));
    }
    if let Some(r) = report.ratio {
        out.push_str(&format!(
            "ratio {} / {} = {r:.3}\n",
            report.entries[0].name, report.entries[1].name
        ));
    }
    out.push_str(&format!("repeats {} (threads: 1)", report.repeats));
    if report.low_confidence {
        out.push_str(" [low confidence: repeats=1]");
    }
    out.push('\n');
    out
}

pub fn cmd_bench(configs: &[ExperimentConfig], repeats: usize) -> Result<i32> {
    let report = run_bench(configs, repeats)?;
    print!("{}", render(&report));
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn single_repeat_is_flagged() {
        let cfg = ExperimentConfig::from_toml(
            "steps = 3\n[task]\nsamples = 16\n[bench]\nwarmup_runs = 0",
        )
        .unwrap();
        let report = run_bench(&[cfg], 1).unwrap();
        assert!(report.low_confidence);
        assert!(render(&report).contains("low confidence"));
        assert!(report.ratio.is_none());
    }
}
