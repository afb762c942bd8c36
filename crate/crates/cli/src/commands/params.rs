use anyhow::Result;

use diablo_core::{count_diablo, count_full, count_lora, CostReport};

use crate::config::{AdapterChoice, ConfigError, ExperimentConfig};

/// Thousands separators: `70254592` → `70,254,592`.
pub fn group_digits(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

pub fn cost_report(cfg: &ExperimentConfig) -> Result<CostReport, ConfigError> {
    let shapes = cfg.shape_config()?;
    let targets = cfg.targets().unwrap_or_else(|| shapes.module_tags());
    let r = match cfg.adapter.kind {
        AdapterChoice::Diablo => count_diablo(&shapes, cfg.adapter.num_blocks, &targets),
        AdapterChoice::Lora => count_lora(&shapes, cfg.adapter.rank, &targets),
        AdapterChoice::Full => count_full(&shapes, &targets),
        AdapterChoice::None => count_full(&shapes, &[]),
    };
    r.map_err(|e| ConfigError(e.to_string()))
}

pub fn render(r: &CostReport) -> String {
    let tags: Vec<&str> = r.targets.iter().map(|t| t.as_str()).collect();
    let rows = [
        ("model", r.model.clone()),
        ("method", r.method.clone()),
        (
            "targets",
            format!("{} ({} layers)", tags.join(" "), r.targeted_layers),
        ),
        ("trainable params", group_digits(r.trainable_params)),
        ("total params", group_digits(r.total_params)),
        ("fraction", format!("{:.4}%", r.percent())),
        (
            "adapter FLOPs/token",
            group_digits(r.forward_flops_per_token),
        ),
        ("adapter MACs/token", group_digits(r.forward_macs_per_token)),
        ("base FLOPs/token", group_digits(r.forward_flops_base)),
    ];
    let mut out = String::from("# FLOPs count one multiply-add as 2\n");
    for (k, v) in rows {
        out.push_str(&format!("{k:<20} {v}\n"));
    }
    out
}

/// One `--expect` outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectCheck {
    pub key: String,
    pub expected: f64,
    pub actual: f64,
    pub tolerance: f64,
    pub ok: bool,
}

/// Checks `key=value` expectations against a report.
///
/// Keys: `fraction` (a ratio, or percent when suffixed with `%`),
/// `trainable_params`, `total_params`, `flops`, and `tol`, which sets the
/// absolute tolerance for `fraction` in the same units. Counts must match exactly.
pub fn check_expectations(
    report: &CostReport,
    expects: &[String],
) -> Result<Vec<ExpectCheck>, ConfigError> {
    let mut tol: Option<f64> = None;
    let mut pending = Vec::new();
    for e in expects {
        let (k, v) = e
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("--expect needs key=value, got {e:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        let (num, percent) = match v.strip_suffix('%') {
            Some(p) => (p, true),
            None => (v, false),
        };
        let parsed: f64 = num
            .replace(['_', ','], "")
            .parse()
            .map_err(|_| ConfigError(format!("--expect {k}: cannot parse {v:?} as a number")))?;
        match k {
            "tol" => tol = Some(parsed),
            "fraction" | "trainable_params" | "total_params" | "flops" => pending.push((k.to_string(), parsed, percent)),
            _ => {
                return Err(ConfigError(format!(
                    "unknown --expect key {k:?}; valid keys: fraction, trainable_params, total_params, flops, tol"
                )))
            }
        }
    }
    Ok(pending
        .into_iter()
        .map(|(key, expected, percent)| {
            let (actual, tolerance) = match key.as_str() {
                "fraction" if percent => (report.percent(), tol.unwrap_or(0.005)),
                "fraction" => (report.fraction, tol.unwrap_or(5e-5)),
                "trainable_params" => (report.trainable_params as f64, 0.0),
                "total_params" => (report.total_params as f64, 0.0),
                _ => (report.forward_flops_per_token as f64, 0.0),
            };
            ExpectCheck {
                ok: (actual - expected).abs() <= tolerance,
                key,
                expected,
                actual,
                tolerance,
            }
        })
        .collect())
}

/// Prints the report; exit code 1 if any expectation fails.
pub fn cmd_params(cfg: &ExperimentConfig, expects: &[String], json: bool) -> Result<i32> {
    let report = cost_report(cfg)?;
    let checks = check_expectations(&report, expects)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", render(&report));
    }
    let mut code = 0;
    for c in &checks {
        let status = if c.ok { "ok" } else { "MISMATCH" };
        println!(
            "expect {:<16} {status}: expected {} actual {} (tol {})",
            c.key, c.expected, c.actual, c.tolerance
        );
        if !c.ok {
            code = 1;
        }
    }
    Ok(code)
}
