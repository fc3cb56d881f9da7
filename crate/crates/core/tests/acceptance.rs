//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use asymlora::adapters::{
    merge_into, param_count, softmax, AdapterSpec, GateNetwork, Mixing, Routing, SchemeKind, SchemeRegistry,
};
use asymlora::config::ExperimentConfig;
use asymlora::data::sample_batch;
use asymlora::host::{HostModel, Layer};
use asymlora::linalg::{Matrix, Rng};
use asymlora::metrics::{read_records, read_reports, without_wall_clock};
use asymlora::optim::OptimizerRegistry;
use asymlora::runner;
use asymlora::train::{build_model, build_tasks, compare_schemes, run_scheme, sign_test_p, train, RunReport, TrainOptions};
use nalgebra::DMatrix;
use rayon::prelude::*;

type Outcome = Result<String, String>;

fn preset(name: &str, overrides: &[&str]) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.toml"));
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::parse_with_overrides(&text, &overrides).expect("bundled config is valid")
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant) -> Result<f64, String> {
    let secs = start.elapsed().as_secs_f64();
    if start.elapsed() > limit {
        Err(format!("took {secs:.1}s, limit {}s", limit.as_secs()))
    } else {
        Ok(secs)
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::default();
    cfg.gradcheck.configs = 20;
    cfg.gradcheck.epsilon = 1e-5;
    cfg.gradcheck.max_dim = 8;
    cfg.gradcheck.max_rank = 3;
    cfg.gradcheck.max_tasks = 3;
    cfg.gradcheck.max_experts = 2;
    let s = runner::gradcheck_sweep(&cfg).map_err(|e| e.to_string())?;
    let secs = within(Duration::from_secs(30), start)?;
    let mut parts = Vec::new();
    for kind in SchemeKind::ALL {
        let cases: Vec<_> = s.cases.iter().filter(|c| c.scheme == kind.name()).collect();
        if cases.len() != 20 {
            return Err(format!("{kind}: {} configs", cases.len()));
        }
        let worst = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
        parts.push(format!("{kind} {worst:.1e}"));
    }
    check(
        s.max_rel_error < 1e-4,
        format!("max rel err {} (all schemes {:.1e}) < 1e-4, {secs:.1}s", parts.join(", "), s.max_rel_error),
    )
}

fn zero_init_identity() -> Outcome {
    let cfg = preset("default", &[]);
    let registry = SchemeRegistry::builtin();
    let mut rng = Rng::new(2024);
    let mut builds = 0;
    for kind in SchemeKind::ALL {
        for routing in [Routing::Oracle, Routing::Learned] {
            for mixing in [Mixing::Soft, Mixing::Top1] {
                let mut c = cfg.clone();
                c.adapter.routing = routing;
                c.adapter.mixing = mixing;
                let model = build_model(&c, &registry, kind, rng.next_u64()).map_err(|e| e.to_string())?;
                builds += 1;
                for _ in 0..100 {
                    let batch = 1 + rng.below(8);
                    let std = 1.0 + 3.0 * rng.uniform();
                    let x = rng.normal_matrix(model.d_in(), batch, std);
                    let base = model.base_forward(&x).map_err(|e| e.to_string())?;
                    for task in 0..c.data.num_tasks {
                        let (out, _) = model.forward(task, &x).map_err(|e| e.to_string())?;
                        let same = out.as_slice().iter().zip(base.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
                        if !same {
                            return Err(format!("{kind} {routing:?} {mixing:?} task {task}: output differs from base"));
                        }
                    }
                }
            }
        }
    }
    Ok(format!("{builds} fresh models x 100 inputs x every task bit-identical to the base forward"))
}

fn frozen_base() -> Outcome {
    let cfg = preset("default", &["train.steps=2000"]);
    let cells: Vec<(SchemeKind, u64)> = SchemeKind::ALL
        .iter()
        .flat_map(|&k| [0u64, 1, 2].into_iter().map(move |s| (k, s)))
        .collect();
    let results: Vec<Result<(), String>> = cells
        .par_iter()
        .map(|&(kind, seed)| {
            let model = build_model(&cfg, &SchemeRegistry::builtin(), kind, seed).map_err(|e| e.to_string())?;
            let before = model.freeze_fingerprint();
            let tasks = build_tasks(&cfg, seed).map_err(|e| e.to_string())?;
            let opt = OptimizerRegistry::builtin().build(&cfg.optimizer).map_err(|e| e.to_string())?;
            let out = train(model, tasks, opt, &TrainOptions::from_config(&cfg), seed, |_| Ok(()))
                .map_err(|e| e.to_string())?;
            if out.report.steps != 2000 {
                return Err(format!("{kind} seed {seed}: only {} steps", out.report.steps));
            }
            if out.model.freeze_fingerprint() != before {
                return Err(format!("{kind} seed {seed}: fingerprint changed"));
            }
            Ok(())
        })
        .collect();
    for r in results {
        r?;
    }
    Ok(format!("fingerprint unchanged after 2000 steps for {} scheme/seed runs", cells.len()))
}

fn merge_equivalence() -> Outcome {
    let registry = SchemeRegistry::builtin();
    let mut rng = Rng::new(77);
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    for c in 0..20 {
        for kind in SchemeKind::ALL {
            let widths = [2 + rng.below(7), 2 + rng.below(7), 2 + rng.below(7)];
            let rank = 1 + rng.below(widths.iter().copied().min().unwrap().min(3));
            let n = 1 + rng.below(3);
            let routing = if c % 2 == 1 && kind != SchemeKind::Lora {
                Routing::Learned
            } else {
                Routing::Oracle
            };
            let mut model = HostModel::random(&widths, &mut rng).map_err(|e| e.to_string())?;
            let spec = AdapterSpec::new(kind, 0, 0, rank)
                .with_tasks(n)
                .with_experts(1 + rng.below(2))
                .with_scale(0.5 + rng.uniform())
                .with_routing(routing);
            model
                .attach_scheme(&registry, &spec, &[], rng.next_u64())
                .map_err(|e| e.to_string())?;
            for p in model.parameters_mut() {
                *p = rng.normal_matrix(p.rows(), p.cols(), 0.7);
            }
            let task = rng.below(n);
            let cols = 1 + rng.below(6);
            let x = rng.normal_matrix(widths[0], cols, 1.0);
            let (out, cache) = model.forward(task, &x).map_err(|e| e.to_string())?;

            let merged_layers = model
                .layers()
                .iter()
                .enumerate()
                .map(|(l, layer)| {
                    let a = model.adapter(l).expect("every layer adapted");
                    let w = merge_into(&layer.weight, a, task, &cache.inputs[l])?;
                    Layer::new(w, layer.bias.clone(), layer.activation)
                })
                .collect::<asymlora::Result<Vec<_>>>()
                .map_err(|e| e.to_string())?;
            let merged = HostModel::new(merged_layers).map_err(|e| e.to_string())?;
            let out_merged = merged.base_forward(&x).map_err(|e| e.to_string())?;
            worst = worst.max(out.max_abs_diff(&out_merged).map_err(|e| e.to_string())?);
            runs += 1;
        }
    }
    check(worst < 1e-10, format!("max abs deviation {worst:.2e} < 1e-10 over {runs} models (20 configs x 4 schemes)"))
}

fn parameter_accounting() -> Outcome {
    let registry = SchemeRegistry::builtin();
    let mut rng = Rng::new(5);
    let mut strict = 0;
    for _ in 0..50 {
        let d_in = 1 + rng.below(24);
        let d_out = 1 + rng.below(24);
        let rank = 1 + rng.below(d_in.min(d_out));
        let n = 1 + rng.below(5);
        let j = 1 + rng.below(4);
        let mut totals = Vec::new();
        for kind in SchemeKind::ALL {
            let spec = AdapterSpec::new(kind, d_in, d_out, rank).with_tasks(n).with_experts(j);
            let adapter = registry
                .build(kind.name(), &spec, &mut Rng::new(1))
                .map_err(|e| e.to_string())?;
            let enumerated: usize = adapter.params().iter().map(|p| p.len()).sum();
            let formula = param_count(kind, d_in, d_out, rank, n, j).total();
            if enumerated != formula || adapter.num_trainable() != formula {
                return Err(format!(
                    "{kind} d_in={d_in} d_out={d_out} r={rank} N={n} J={j}: formula {formula}, enumerated {enumerated}"
                ));
            }
            totals.push((kind, formula));
        }
        let get = |k: SchemeKind| totals.iter().find(|(kk, _)| *kk == k).unwrap().1;
        if n >= 2 {
            if get(SchemeKind::AsymLora) >= get(SchemeKind::MoeLora) {
                return Err(format!("AsymLoRA not smaller than MoE-LoRA at N={n}"));
            }
            strict += 1;
        }
    }
    Ok(format!("50 tuples x 4 schemes exact; AsymLoRA < MoE-LoRA in all {strict} tuples with N >= 2"))
}

fn degeneracy() -> Outcome {
    let bits = |r: &[asymlora::train::StepRecord]| r.iter().map(|s| (s.task, s.loss.to_bits())).collect::<Vec<_>>();
    let mut compared = 0;
    for seed in [0u64, 1] {
        let single = preset("default", &["data.num_tasks=1", "train.steps=500"]);
        let lora = run_scheme(&single, SchemeKind::Lora, seed, |_| Ok(())).map_err(|e| e.to_string())?;
        let asym = run_scheme(&single, SchemeKind::AsymLora, seed, |_| Ok(())).map_err(|e| e.to_string())?;
        if bits(&lora.trace) != bits(&asym.trace) || lora.report.per_task_loss != asym.report.per_task_loss {
            return Err(format!("AsymLoRA(N=1) diverges from LoRA at seed {seed}"));
        }
        let one = preset("default", &["adapter.num_experts=1", "train.steps=500"]);
        let asym = run_scheme(&one, SchemeKind::AsymLora, seed, |_| Ok(())).map_err(|e| e.to_string())?;
        let moe = run_scheme(&one, SchemeKind::MoeAsymLora, seed, |_| Ok(())).map_err(|e| e.to_string())?;
        if bits(&asym.trace) != bits(&moe.trace) || asym.report.per_task_loss != moe.report.per_task_loss {
            return Err(format!("MoE-AsymLoRA(J=1) diverges from AsymLoRA at seed {seed}"));
        }
        compared += 2 * lora.trace.len();
    }
    Ok(format!("AsymLoRA(N=1) == LoRA and MoE-AsymLoRA(J=1) == AsymLoRA bit for bit, {compared} steps per side"))
}

fn gate_simplex() -> Outcome {
    let mut rng = Rng::new(99);
    let mut worst_sum: f64 = 0.0;
    let mut worst_shift: f64 = 0.0;
    for _ in 0..1000 {
        let j = 1 + rng.below(6);
        let d = 1 + rng.below(8);
        let spread = 10f64.powf(rng.uniform_range(-2.0, 1.5));
        let gate = GateNetwork::new(rng.normal_matrix(j, d, spread), rng.normal_matrix(j, 1, spread))
            .map_err(|e| e.to_string())?;
        let cols = 1 + rng.below(5);
        let x = rng.normal_matrix(d, cols, 2.0);
        let (_, logits) = gate.logits(&x).map_err(|e| e.to_string())?;
        let p = gate.forward(&x, Mixing::Soft).map_err(|e| e.to_string())?.probs;
        if p.iter().any(|&v| !(v >= 0.0)) {
            return Err(format!("negative or NaN weight in {p:?}"));
        }
        worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
        let c = rng.uniform_range(-50.0, 50.0);
        let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
        let q = softmax(&shifted);
        for (a, b) in p.iter().zip(&q) {
            worst_shift = worst_shift.max((a - b).abs());
        }
    }
    check(
        worst_sum <= 1e-9 && worst_shift <= 1e-12,
        format!("1000 gates: weights >= 0, |sum - 1| <= {worst_sum:.1e} (limit 1e-9), shift deviation {worst_shift:.1e} (limit 1e-12)"),
    )
}

fn realizable_recovery() -> Outcome {
    let start = Instant::now();
    let cfg = preset("realizable", &[]);
    let seed = cfg.experiment.seeds[0];
    if cfg.data.num_tasks != 1 || cfg.data.noise_std != 0.0 || cfg.teacher_rank() != cfg.adapter.rank || cfg.train.steps > 2000
    {
        return Err("realizable preset is not single-task, noise-free, r == r*, <= 2000 steps".into());
    }
    let out = run_scheme(&cfg, cfg.scheme().map_err(|e| e.to_string())?, seed, |_| Ok(())).map_err(|e| e.to_string())?;

    let task = build_tasks(&cfg, seed).map_err(|e| e.to_string())?.remove(0);
    let batch = sample_batch(&task, &out.model, 512, &mut Rng::derive(seed, "oracle")).map_err(|e| e.to_string())?;
    let to_na = |m: &Matrix| DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    let x = to_na(&batch.inputs);
    let y = to_na(&batch.targets);
    let mut xa = DMatrix::from_element(x.nrows() + 1, x.ncols(), 1.0);
    xa.view_mut((0, 0), (x.nrows(), x.ncols())).copy_from(&x);
    let w_ls = (&y * xa.transpose()) * (&xa * xa.transpose()).try_inverse().ok_or("singular Gram matrix")?;
    let oracle_mse = (&y - &w_ls * &xa).norm_squared() / (y.nrows() * y.ncols()) as f64;
    let merged = merge_into(
        &out.model.layers()[0].weight,
        out.model.adapter(0).ok_or("no adapter")?,
        0,
        &batch.inputs,
    )
    .map_err(|e| e.to_string())?;
    let gap = (to_na(&merged) - w_ls.view((0, 0), (y.nrows(), x.nrows()))).norm_squared() / y.nrows() as f64;
    let secs = within(Duration::from_secs(60), start)?;
    check(
        out.report.mean_loss < 1e-3 && oracle_mse < 1e-20 && gap < 1e-3,
        format!(
            "held-out MSE {:.2e} < 1e-3 after {} steps; least-squares oracle MSE {oracle_mse:.1e}, weight gap to oracle {gap:.2e}, {secs:.1}s",
            out.report.mean_loss, out.report.steps
        ),
    )
}

fn qualitative_ordering() -> Outcome {
    let start = Instant::now();
    let conflict = preset("conflict", &[]);
    if (conflict.data.commonality, conflict.data.conflict, conflict.data.num_tasks, conflict.experiment.seeds.len())
        != (0.3, 0.9, 3, 5)
    {
        return Err("conflict preset is not kappa=0.3, gamma=0.9, N=3, 5 seeds".into());
    }
    let table = compare_schemes(&conflict).map_err(|e| e.to_string())?;
    let mean = |t: &asymlora::train::ComparisonTable, s: &str| t.row(s).map(|r| r.mean).unwrap_or(f64::NAN);
    let (lora, moe, asym) = (mean(&table, "lora"), mean(&table, "moe-lora"), mean(&table, "asymlora"));
    let (wins, n) = table.wins("asymlora", "lora");

    let common = preset("commonality", &[]);
    if (common.data.commonality, common.data.conflict) != (1.0, 0.0) {
        return Err("commonality preset is not kappa=1, gamma=0".into());
    }
    let ctable = compare_schemes(&common).map_err(|e| e.to_string())?;
    let (c_lora, c_asym) = (mean(&ctable, "lora"), mean(&ctable, "asymlora"));
    let rel = (c_lora - c_asym).abs() / c_asym;
    let secs = within(Duration::from_secs(600), start)?;
    check(
        asym <= moe && asym < lora && wins >= 4 && rel <= 0.10,
        format!(
            "conflict: AsymLoRA {asym:.4} <= MoE-LoRA {moe:.4}, < LoRA {lora:.4} on {wins}/{n} seeds (sign p {:.3}); commonality: |LoRA {c_lora:.4} - AsymLoRA {c_asym:.4}| = {:.1}% <= 10%; {secs:.1}s",
            sign_test_p(wins, n),
            100.0 * rel
        ),
    )
}

fn reproducibility() -> Outcome {
    let base = preset("default", &["train.steps=200", "train.eval_batches=2"]);
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().expect("tempdir")).collect();
    let with_dir = |d: &tempfile::TempDir, steps: u64| {
        let mut c = base.clone();
        c.experiment.out_dir = d.path().to_path_buf();
        c.adapter.scheme = "moe-asymlora".into();
        c.train.steps = steps;
        c
    };
    let e = |e: asymlora::Error| e.to_string();
    runner::train(&with_dir(&dirs[0], 200), None).map_err(e)?;
    runner::train(&with_dir(&dirs[1], 200), None).map_err(e)?;
    let read = |d: &tempfile::TempDir| std::fs::read_to_string(d.path().join(runner::METRICS_FILE)).expect("metrics");
    let (a, b) = (read(&dirs[0]), read(&dirs[1]));
    if without_wall_clock(&a).map_err(e)? != without_wall_clock(&b).map_err(e)? {
        return Err("metrics files differ between identical runs".into());
    }

    runner::train(&with_dir(&dirs[2], 100), None).map_err(e)?;
    let ckpt = dirs[2].path().join(runner::CHECKPOINT_FILE);
    runner::train(&with_dir(&dirs[2], 200), Some(&ckpt)).map_err(e)?;
    let reports = |d: &tempfile::TempDir| -> Result<Vec<RunReport>, String> {
        let recs = read_records(&d.path().join(runner::METRICS_FILE)).map_err(e)?;
        read_reports(&recs).map_err(e)
    };
    let strip = |r: &RunReport| RunReport {
        wall_clock_secs: 0.0,
        ..r.clone()
    };
    let full = reports(&dirs[0])?;
    let resumed = reports(&dirs[2])?;
    let (Some(f), Some(r)) = (full.last(), resumed.last()) else {
        return Err("missing report records".into());
    };
    if strip(f) != strip(r) {
        return Err(format!("resumed report differs: {:?} vs {:?}", strip(f), strip(r)));
    }
    let steps = |t: &str| t.lines().filter(|l| l.contains("\"kind\":\"step\"")).map(String::from).collect::<Vec<_>>();
    if steps(&a) != steps(&read(&dirs[2])) {
        return Err("resumed step records differ from the uninterrupted run".into());
    }
    Ok(format!(
        "{} metrics lines identical across runs (wall clock excluded); 100 + 100 resumed == 200 uninterrupted",
        a.lines().count()
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", gradient_correctness),
        ("zero-init identity", zero_init_identity),
        ("frozen base", frozen_base),
        ("merge equivalence", merge_equivalence),
        ("parameter accounting", parameter_accounting),
        ("degeneracy equivalences", degeneracy),
        ("gate simplex and shift invariance", gate_simplex),
        ("realizable recovery", realizable_recovery),
        ("qualitative ordering", qualitative_ordering),
        ("reproducibility", reproducibility),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {:>2} {name}: {d} [{secs:.1}s]", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {d} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
