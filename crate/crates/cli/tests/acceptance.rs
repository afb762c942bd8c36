//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any FAIL.
//!
//! Run with `cargo test -p diablo-cli --test acceptance`.

use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use diablo_cli::commands::bench::run_bench;
use diablo_cli::commands::params::cost_report;
use diablo_cli::commands::train::run_training;
use diablo_cli::config::{AdapterChoice, ExperimentConfig};
use diablo_core::model::{check_model_gradients, randomize_adapters, GradCheckOptions};
use diablo_core::oracle::{
    dense_blockdiag, frobenius_rel, full_gradient, naive_matmul, slice_block,
};
use diablo_core::trainer::{without_timing_columns, TaskKind};
use diablo_core::{
    attach_adapters, init_diablo, parity_sweep, quantize, AdaptedLinear, AdapterSpec, Mlp, Model,
    ModuleTag, Rng, Tensor, TinyTransformerBlock,
};

type Verdict = (bool, String);
type Criterion = (&'static str, fn() -> Verdict);

fn config(name: &str) -> ExperimentConfig {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", name]
        .iter()
        .collect();
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Uniform integer in `lo..=hi`.
fn pick(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below((hi - lo + 1) as u64) as usize
}

fn param_counts() -> Verdict {
    let within = |got: f64, want: f64| (100.0 * got - want).abs() <= 0.01;
    let n64 = cost_report(&config("params_llama2_diablo_n64.toml")).unwrap();
    let n128 = cost_report(&config("params_llama2_diablo_n128.toml")).unwrap();
    let lora = cost_report(&config("params_llama2_lora_r64.toml")).unwrap();
    let ok = within(n64.fraction, 1.04)
        && within(n128.fraction, 0.52)
        && within(lora.fraction, 1.67)
        && n64.trainable_params == 70_254_592
        && lora.trainable_params == 112_197_632;
    let detail = format!(
        "diablo N=64 {} ({:.4}%), N=128 {} ({:.4}%), lora r=64 {} ({:.4}%)",
        n64.trainable_params,
        n64.percent(),
        n128.trainable_params,
        n128.percent(),
        lora.trainable_params,
        lora.percent()
    );
    (ok, detail)
}

fn gradient_identity() -> Verdict {
    const INSTANCES: usize = 1000;
    let mut rng = Rng::new(2);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let (b, n, d1, d2) = (
            pick(&mut rng, 1, 8),
            pick(&mut rng, 1, 8),
            pick(&mut rng, 1, 8),
            pick(&mut rng, 1, 8),
        );
        let (m1, m2) = (n * d1, n * d2);
        let mut a = init_diablo::<f32>(m1, m2, n).unwrap();
        *a.blocks_mut() = rng.normal_tensor(&[n, d1, d2], 1.0);
        let x: Tensor<f32> = rng.normal_tensor(&[b, m1], 1.0);
        let g: Tensor<f32> = rng.normal_tensor(&[b, m2], 1.0);
        let grads = a.param_grads(&x, &g).unwrap();
        let dense = full_gradient(&x, &g);
        for i in 0..n {
            let got = Tensor::new(
                vec![d1, d2],
                grads.data()[i * d1 * d2..(i + 1) * d1 * d2].to_vec(),
            )
            .unwrap();
            worst = worst.max(frobenius_rel(
                &got,
                &slice_block(&dense, i * d1, i * d2, d1, d2),
            ));
        }
    }
    (
        worst <= 1e-6,
        format!("{INSTANCES} f32 instances, max block rel error {worst:.2e} (tol 1e-6)"),
    )
}

fn adapter_specs(rng: &mut Rng, min_side: usize) -> [AdapterSpec; 2] {
    [
        AdapterSpec::BlockDiagonal {
            num_blocks: pick(rng, 1, min_side),
        },
        AdapterSpec::Lora {
            rank: pick(rng, 1, min_side),
            scaling: 0.25 + rng.uniform(),
        },
    ]
}

fn finite_differences() -> Verdict {
    const TRIALS: usize = 100;
    let opts = GradCheckOptions::default();
    // [model][adapter] -> (trials, checked coordinates, worst error)
    let mut stats = [[(0usize, 0usize, 0.0f64); 2]; 3];
    let mut failure = None;
    let mut record = |model: usize, adapter: usize, rep: diablo_core::GradCheckReport| {
        let s = &mut stats[model][adapter];
        s.0 += 1;
        s.1 += rep.checked;
        s.2 = s.2.max(rep.max_rel_error);
        if !rep.passed() && failure.is_none() {
            failure = Some(rep.to_string());
        }
    };
    let root = Rng::new(3);
    for trial in 0..TRIALS {
        let mut rng = root.fork(trial as u64);
        let (m1, m2, b) = (
            pick(&mut rng, 1, 12),
            pick(&mut rng, 1, 12),
            pick(&mut rng, 1, 4),
        );
        for (k, spec) in adapter_specs(&mut rng, m1.min(m2)).into_iter().enumerate() {
            let mut layer = AdaptedLinear::<f64>::random(m1, m2, ModuleTag::Generic, &mut rng);
            attach_adapters(&mut layer, spec, &[ModuleTag::Generic], &mut rng).unwrap();
            randomize_adapters(&mut layer, &mut rng, 0.5);
            let x = rng.normal_tensor(&[b, m1], 1.0);
            record(0, k, check_model_gradients(&layer, &x, opts, None).unwrap());
        }

        let dims = [
            pick(&mut rng, 2, 10),
            pick(&mut rng, 2, 10),
            pick(&mut rng, 2, 10),
        ];
        let min_side = *dims.iter().min().unwrap();
        for (k, spec) in adapter_specs(&mut rng, min_side).into_iter().enumerate() {
            let mut mlp = Mlp::<f64>::new(&dims, &mut rng).unwrap();
            attach_adapters(&mut mlp, spec, &[ModuleTag::Generic], &mut rng).unwrap();
            randomize_adapters(&mut mlp, &mut rng, 0.5);
            let x = rng.normal_tensor(&[b, dims[0]], 1.0);
            record(1, k, check_model_gradients(&mlp, &x, opts, None).unwrap());
        }

        let (h, f, s) = (
            pick(&mut rng, 2, 6),
            pick(&mut rng, 2, 8),
            pick(&mut rng, 1, 4),
        );
        for (k, spec) in adapter_specs(&mut rng, h.min(f)).into_iter().enumerate() {
            let mut block = TinyTransformerBlock::<f64>::new(h, f, &mut rng).unwrap();
            attach_adapters(
                &mut block,
                spec,
                &ModuleTag::parse_list("QKVOGUD").unwrap(),
                &mut rng,
            )
            .unwrap();
            randomize_adapters(&mut block, &mut rng, 0.3);
            let batch = pick(&mut rng, 1, 3);
            let x = rng.normal_tensor(&[batch, s, h], 1.0);
            record(2, k, check_model_gradients(&block, &x, opts, None).unwrap());
        }
    }
    let names = ["linear", "mlp", "transformer"];
    let mut parts = Vec::new();
    let mut ok = failure.is_none();
    for (m, name) in names.iter().enumerate() {
        for (a, kind) in ["diablo", "lora"].iter().enumerate() {
            let (t, c, w) = stats[m][a];
            ok &= t >= TRIALS && c > 0;
            parts.push(format!("{name}/{kind} {t}x max {w:.1e}"));
        }
    }
    let mut detail = format!("{} (tol 1e-4)", parts.join(", "));
    if let Some(f) = failure {
        detail.push_str(&format!("; first failure: {f}"));
    }
    (ok, detail)
}

fn transparent<M: Model<f32> + Clone>(
    model: &M,
    x: &Tensor<f32>,
    spec: AdapterSpec,
    rng: &mut Rng,
) -> bool {
    let mut adapted = model.clone();
    let tags: Vec<ModuleTag> = adapted.module_tags().into_iter().collect();
    attach_adapters(&mut adapted, spec, &tags, rng).unwrap();
    assert!(adapted.trainable_parameters() > 0);
    adapted
        .predict(x)
        .unwrap()
        .bit_eq(&model.predict(x).unwrap())
}

fn zero_init() -> Verdict {
    const INPUTS: usize = 100;
    let mut rng = Rng::new(4);
    let linear = AdaptedLinear::<f32>::random(10, 6, ModuleTag::Generic, &mut rng);
    let mlp = Mlp::<f32>::new(&[10, 8, 6], &mut rng).unwrap();
    let block = TinyTransformerBlock::<f32>::new(8, 12, &mut rng).unwrap();
    let specs = [
        AdapterSpec::BlockDiagonal { num_blocks: 4 },
        AdapterSpec::Lora {
            rank: 2,
            scaling: 2.0,
        },
    ];
    let mut checks = 0;
    let mut mismatches = 0;
    for _ in 0..INPUTS {
        let x: Tensor<f32> = rng.normal_tensor(&[3, 10], 1.0);
        let xt: Tensor<f32> = rng.normal_tensor(&[2, 3, 8], 1.0);
        for spec in specs {
            let results = [
                transparent(&linear, &x, spec, &mut rng),
                transparent(&mlp, &x, spec, &mut rng),
                transparent(&block, &xt, spec, &mut rng),
            ];
            checks += results.len();
            mismatches += results.iter().filter(|r| !**r).count();
        }
    }
    (
        mismatches == 0,
        format!("{INPUTS} inputs x (linear, mlp, transformer) x (diablo, lora): {mismatches}/{checks} outputs differ"),
    )
}

fn dense_equivalence() -> Verdict {
    const INSTANCES: usize = 1000;
    let mut rng = Rng::new(5);
    let mut worst = 0.0f64;
    let mut padded = 0;
    let mut ten_by_four = 0;
    for i in 0..INSTANCES {
        let (m1, n) = if i % 10 == 0 {
            (10, 4)
        } else {
            let m1 = pick(&mut rng, 1, 24);
            (m1, pick(&mut rng, 1, m1))
        };
        let m2 = pick(&mut rng, n, 24);
        let b = pick(&mut rng, 1, 8);
        let mut a = init_diablo::<f32>(m1, m2, n).unwrap();
        let shape = a.blocks().shape().to_vec();
        *a.blocks_mut() = rng.normal_tensor(&shape, 1.0);
        let w: Tensor<f32> = rng.normal_tensor(&[m1, m2], 1.0);
        let x: Tensor<f32> = rng.normal_tensor(&[b, m1], 1.0);
        let got = a.forward(&x, &x.matmul(&w).unwrap()).unwrap();
        let merged = w.cast::<f64>().add(&dense_blockdiag(&a)).unwrap();
        worst = worst.max(frobenius_rel(
            &got,
            &naive_matmul(&x.cast::<f64>(), &merged),
        ));
        padded += usize::from(m1 % n != 0 || !m2.is_multiple_of(n));
        ten_by_four += usize::from(m1 == 10 && n == 4);
    }
    (
        worst <= 1e-6 && ten_by_four > 0,
        format!("{INSTANCES} f32 instances ({padded} padded, {ten_by_four} with m1=10 N=4), max rel error {worst:.2e} (tol 1e-6)"),
    )
}

fn subspace_recovery() -> Verdict {
    let exact = |name: &str| {
        let cfg = config(name);
        let run = run_training(&cfg).unwrap();
        (
            run.outcome.final_loss,
            run.outcome.final_loss < 1e-6 && cfg.steps <= 5000,
        )
    };
    let plateau = |name: &str, kind: AdapterChoice| {
        let mut cfg = config(name);
        cfg.adapter.kind = kind;
        cfg.adapter.rank = 2;
        cfg.adapter.num_blocks = 4;
        let run = run_training(&cfg).unwrap();
        let floor = run.summary.floor.unwrap();
        let best = run.outcome.best_loss;
        (best / floor, floor > 0.0 && best >= 0.5 * floor)
    };
    let (d_loss, d_ok) = exact("recovery_diablo.toml");
    let (l_loss, l_ok) = exact("recovery_lora.toml");
    let (lr2, lr2_ok) = plateau("recovery_diablo.toml", AdapterChoice::Lora);
    let (dn4, dn4_ok) = plateau("recovery_lora.toml", AdapterChoice::Diablo);
    (
        d_ok && l_ok && lr2_ok && dn4_ok,
        format!(
            "blockdiag teacher: diablo N=4 final {d_loss:.1e}, lora r=2 best/floor {lr2:.3}; \
             lowrank teacher: lora r=4 final {l_loss:.1e}, diablo N=4 best/floor {dn4:.3}"
        ),
    )
}

fn flop_parity() -> Verdict {
    let sweep = parity_sweep(64, 4096).unwrap();
    let sizes = sweep
        .iter()
        .map(|p| p.m)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let exact = sweep.iter().all(|p| p.parity && p.flops_equal());
    let report = run_bench(&[config("bench_diablo.toml"), config("bench_lora.toml")], 5).unwrap();
    let ratio = report.ratio.unwrap();
    let same_params = report.entries[0].trainable_params == report.entries[1].trainable_params;
    (
        exact && sizes == 7 && same_params && (0.67..=1.5).contains(&ratio),
        format!(
            "{} parity configs over m=64..4096 all equal; bench m=1024 batch 32: diablo {:.3} ms, lora {:.3} ms, ratio {ratio:.3} (single thread)",
            sweep.len(),
            report.entries[0].median_ms,
            report.entries[1].median_ms
        ),
    )
}

/// Every trailing 100-step mean is no larger than the one a step earlier,
/// up to a relative `1e-12` for f64 rounding.
fn trailing_means_decrease(losses: &[f64]) -> (bool, usize) {
    const W: usize = 100;
    let mut sum: f64 = losses[..W].iter().sum();
    let mut prev = sum / W as f64;
    let mut violations = 0;
    for t in W..losses.len() {
        sum += losses[t] - losses[t - W];
        let mean = sum / W as f64;
        if mean > prev * (1.0 + 1e-12) {
            violations += 1;
        }
        prev = mean;
    }
    (violations == 0, violations)
}

fn quantized_base() -> Verdict {
    let mut rng = Rng::new(8);
    let (mut groups, mut tight) = (0usize, 0usize);
    for bits in [4u8, 2] {
        for &(m1, m2, gs) in &[(16, 16, 8), (64, 32, 64), (100, 7, 16), (33, 5, 4)] {
            let w: Tensor<f32> = rng.normal_tensor(&[m1, m2], 1.0);
            let q = quantize(&w, bits, gs).unwrap();
            let back: Tensor<f64> = q.dequantize();
            for g in 0..m1.div_ceil(gs) {
                for j in 0..m2 {
                    groups += 1;
                    let ok = (g * gs..((g + 1) * gs).min(m1)).all(|k| {
                        let s = q.scale_at(k, j) as f64;
                        let wk = w.get(&[k, j]) as f64;
                        (wk - back.get(&[k, j])).abs()
                            <= s / 2.0 + 4.0 * f64::from(f32::EPSILON) * (s + wk.abs())
                    });
                    tight += usize::from(ok);
                }
            }
        }
    }

    let mut parts = vec![format!("round trip {tight}/{groups} groups within scale/2")];
    let mut ok = tight == groups;
    for bits in [4u8, 2] {
        let mut cfg = config("quant4_diablo.toml");
        cfg.quant.bits = bits;
        assert_eq!(cfg.task.kind, TaskKind::BlockdiagTeacher);
        let run = run_training(&cfg).unwrap();
        let floor = run.summary.floor.unwrap();
        let losses: Vec<f64> = run.outcome.trace.iter().map(|r| r.loss).collect();
        let (mono, violations) = trailing_means_decrease(&losses);
        ok &= mono && !run.outcome.diverged;
        if bits == 4 {
            ok &= run.outcome.final_loss < floor + 1e-3;
        }
        parts.push(format!(
            "{bits}-bit final {:.4e} floor {floor:.4e}, {violations} trailing-mean increases",
            run.outcome.final_loss
        ));
    }
    (ok, parts.join("; "))
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut same = 0;
    let names = [
        "recovery_diablo.toml",
        "recovery_lora.toml",
        "quant4_diablo.toml",
        "bench_lora.toml",
    ];
    for name in names {
        let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", name]
            .iter()
            .collect();
        let csvs: Vec<String> = ["a", "b"]
            .iter()
            .map(|sub| {
                let out = dir.path().join(name).join(sub);
                let status = Command::new(env!("CARGO_BIN_EXE_diablo"))
                    .args(["train", "--config"])
                    .arg(&path)
                    .arg("--out")
                    .arg(&out)
                    .output()
                    .unwrap()
                    .status;
                assert!(status.success(), "{name} exited with {status}");
                without_timing_columns(&std::fs::read_to_string(out.join("metrics.csv")).unwrap())
                    .unwrap()
            })
            .collect();
        same += usize::from(csvs[0] == csvs[1] && csvs[0].lines().count() > 1);
    }
    (
        same == names.len(),
        format!(
            "{same}/{} configs byte-identical across two CLI runs (wall_ms excluded)",
            names.len()
        ),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("parameter counts", param_counts),
        ("gradient identity", gradient_identity),
        ("finite differences", finite_differences),
        ("zero-init transparency", zero_init),
        ("batched/dense equivalence", dense_equivalence),
        ("subspace recovery", subspace_recovery),
        ("FLOP parity", flop_parity),
        ("quantized base", quantized_base),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (ok, detail) = check();
        failed += usize::from(!ok);
        println!(
            "{} {}. {name}: {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            start.elapsed().as_secs_f64()
        );
    }
    println!(
        "{}/{} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
