//! Command implementations behind the `asymlora` binary. Every command
//! writes its artifacts under the configured output directory:
//!
//! | file | written by |
//! |---|---|
//! | `manifest.json` | every command |
//! | `metrics.ndjson` | train, evaluate, compare (appended) |
//! | `checkpoint.bin` | train |
//! | `report.json` | train, evaluate |
//! | `comparison.csv`, `comparison.json` | compare |
//! | `gradcheck.json` | gradcheck |
//! | `dataset.bin` | export-data |

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::adapters::{param_count, AdapterSpec, ParamCount, Routing, SchemeKind, SchemeRegistry};
use crate::autograd::{finite_diff_check, ParamSelector};
use crate::checkpoint::{self, Checkpoint};
use crate::config::ExperimentConfig;
use crate::data::{Dataset, TaskBatch};
use crate::error::{Error, Result};
use crate::host::HostModel;
use crate::linalg::Rng;
use crate::metrics::MetricsWriter;
use crate::optim::OptimizerRegistry;
use crate::train::{
    build_host, build_model, build_tasks, compare_schemes, evaluate, report_for, ComparisonTable, RunReport,
    TrainOptions, Trainer,
};

pub const METRICS_FILE: &str = "metrics.ndjson";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPORT_FILE: &str = "report.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const COMPARISON_JSON: &str = "comparison.json";
pub const GRADCHECK_FILE: &str = "gradcheck.json";
pub const DATASET_FILE: &str = "dataset.bin";

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: String,
    seeds: &'a [u64],
    scheme: &'a str,
    versions: Versions,
    config: String,
}

#[derive(Debug, Serialize)]
struct Versions {
    asymlora: &'static str,
    checkpoint_format: u32,
    dataset_format: u32,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_manifest(cfg: &ExperimentConfig, command: &str) -> Result<PathBuf> {
    let dir = &cfg.experiment.out_dir;
    ensure_dir(dir)?;
    let path = dir.join(MANIFEST_FILE);
    write_json(
        &path,
        &Manifest {
            command,
            config_hash: cfg.hash(),
            seeds: &cfg.experiment.seeds,
            scheme: &cfg.adapter.scheme,
            versions: Versions {
                asymlora: env!("CARGO_PKG_VERSION"),
                checkpoint_format: checkpoint::VERSION,
                dataset_format: 1,
            },
            config: cfg.to_toml(),
        },
    )?;
    Ok(path)
}

fn primary_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.experiment.seeds[0]
}

fn fresh_parts(cfg: &ExperimentConfig, seed: u64) -> Result<(HostModel, Vec<crate::data::TaskSpec>, Box<dyn crate::optim::Optimizer>)> {
    let model = build_model(cfg, &SchemeRegistry::builtin(), cfg.scheme()?, seed)?;
    let tasks = build_tasks(cfg, seed)?;
    let optimizer = OptimizerRegistry::builtin().build(&cfg.optimizer)?;
    Ok((model, tasks, optimizer))
}

/// Trains the configured scheme on the first configured seed until
/// `train.steps` steps are done in total. With `resume`, training continues
/// from that checkpoint; the result equals an uninterrupted run.
pub fn train(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<RunReport> {
    let seed = primary_seed(cfg);
    let dir = &cfg.experiment.out_dir;
    write_manifest(cfg, "train")?;
    let (model, tasks, optimizer) = fresh_parts(cfg, seed)?;
    let mut trainer = match resume {
        Some(path) => Checkpoint::load(path)?.restore(model, tasks, optimizer, cfg.data.batch_size)?,
        None => Trainer::new(model, tasks, optimizer, cfg.data.batch_size, seed)?,
    };
    let remaining = cfg.train.steps.saturating_sub(trainer.steps_done());
    let fingerprint = trainer.model().freeze_fingerprint();
    let scheme = cfg.adapter.scheme.clone();
    let log_every = cfg.train.log_every;

    let start = Instant::now();
    let mut metrics = MetricsWriter::append(&dir.join(METRICS_FILE))?;
    trainer.run(remaining, |r| {
        if r.step % log_every == 0 {
            metrics.step(&scheme, seed, r)?;
        }
        Ok(())
    })?;
    if trainer.model().freeze_fingerprint() != fingerprint {
        return Err(Error::InvalidParameter("frozen base weights changed during training".into()));
    }
    let report = report_for(&trainer, &scheme, seed, &TrainOptions::from_config(cfg), start)?;
    metrics.report(&report)?;
    metrics.flush()?;
    Checkpoint::capture(&trainer).save(&dir.join(CHECKPOINT_FILE))?;
    write_json(&dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Held-out evaluation of a saved checkpoint (default: the output
/// directory's `checkpoint.bin`).
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<RunReport> {
    let seed = primary_seed(cfg);
    let dir = &cfg.experiment.out_dir;
    write_manifest(cfg, "evaluate")?;
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| dir.join(CHECKPOINT_FILE));
    let (model, tasks, optimizer) = fresh_parts(cfg, seed)?;
    let trainer = Checkpoint::load(&path)?.restore(model, tasks, optimizer, cfg.data.batch_size)?;
    let start = Instant::now();
    let eval = evaluate(
        trainer.model(),
        trainer.tasks(),
        cfg.train.eval_batches,
        cfg.train.eval_batch_size,
        seed,
    )?;
    let report = RunReport {
        scheme: cfg.adapter.scheme.clone(),
        seed,
        steps: trainer.steps_done(),
        mean_loss: eval.mean_loss(),
        total_loss: eval.per_task_loss.iter().sum(),
        per_task_loss: eval.per_task_loss,
        trainable_params: trainer.model().num_trainable(),
        param_counts: crate::train::site_params(trainer.model()),
        final_train_loss: f64::NAN,
        mean_gate_entropy: None,
        gate_usage: eval.gate_usage,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    let mut metrics = MetricsWriter::append(&dir.join(METRICS_FILE))?;
    metrics.report(&report)?;
    write_json(&dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Every scheme in `compare.schemes` over every seed.
pub fn compare(cfg: &ExperimentConfig) -> Result<ComparisonTable> {
    let dir = &cfg.experiment.out_dir;
    write_manifest(cfg, "compare")?;
    let table = compare_schemes(cfg)?;
    let mut metrics = MetricsWriter::append(&dir.join(METRICS_FILE))?;
    for r in &table.reports {
        metrics.report(r)?;
    }
    metrics.flush()?;
    let csv = dir.join(COMPARISON_CSV);
    fs::write(&csv, table.to_csv()).map_err(|e| Error::io(&csv, e))?;
    write_json(&dir.join(COMPARISON_JSON), &table)?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckCase {
    pub scheme: String,
    pub index: usize,
    pub widths: Vec<usize>,
    pub rank: usize,
    pub num_tasks: usize,
    pub num_experts: usize,
    pub routing: Routing,
    pub task: usize,
    pub max_rel_error: f64,
    pub worst: Option<String>,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckSummary {
    pub tolerance: f64,
    pub epsilon: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub cases: Vec<GradcheckCase>,
}

/// Smallest |pre-activation| tolerated at a relu; closer inputs are
/// resampled so central differences never straddle the kink.
const KINK_MARGIN: f64 = 1e-3;

fn gradcheck_case(cfg: &ExperimentConfig, kind: SchemeKind, index: usize, seed: u64) -> Result<GradcheckCase> {
    let g = &cfg.gradcheck;
    let mut rng = Rng::derive(seed, &format!("gradcheck.{}.{index}", kind.name()));
    let dim = |rng: &mut Rng| 2 + rng.below(g.max_dim - 1);
    let widths = vec![dim(&mut rng), dim(&mut rng), dim(&mut rng)];
    let max_rank = g.max_rank.min(*widths.iter().min().expect("non-empty"));
    let rank = 1 + rng.below(max_rank);
    let num_tasks = 1 + rng.below(g.max_tasks);
    let num_experts = 1 + rng.below(g.max_experts);
    let routing = if kind != SchemeKind::Lora && index % 4 == 3 {
        Routing::Learned
    } else {
        Routing::Oracle
    };
    let task = rng.below(num_tasks);

    let mut model = HostModel::random(&widths, &mut rng)?;
    let spec = AdapterSpec::new(kind, 0, 0, rank)
        .with_tasks(num_tasks)
        .with_experts(num_experts)
        .with_scale(0.5 + rng.uniform())
        .with_routing(routing);
    model.attach_scheme(&SchemeRegistry::builtin(), &spec, &[], rng.next_u64())?;
    for p in model.parameters_mut() {
        *p = rng.normal_matrix(p.rows(), p.cols(), 0.5);
    }
    let batch = loop {
        let x = rng.normal_matrix(widths[0], 3, 1.0);
        let y = rng.normal_matrix(widths[2], 3, 1.0);
        let (_, cache) = model.forward(task, &x)?;
        if cache.min_abs_relu_preactivation(&model) >= KINK_MARGIN {
            break TaskBatch::new(task, x, y)?;
        }
    };
    let report = finite_diff_check(&mut model, &batch, &ParamSelector::All, g.epsilon)?;
    Ok(GradcheckCase {
        scheme: kind.name().to_string(),
        index,
        widths,
        rank,
        num_tasks,
        num_experts,
        routing,
        task,
        max_rel_error: report.max_rel_error,
        worst: report.worst.map(|(n, k)| format!("{n}[{k}]")),
        checked: report.checked,
    })
}

/// Finite-difference sweep over `gradcheck.configs` random small models per
/// scheme. Does not touch the filesystem.
pub fn gradcheck_sweep(cfg: &ExperimentConfig) -> Result<GradcheckSummary> {
    let seed = primary_seed(cfg);
    let mut cases = Vec::new();
    for name in &cfg.gradcheck.schemes {
        let kind: SchemeKind = name.parse()?;
        for i in 0..cfg.gradcheck.configs {
            cases.push(gradcheck_case(cfg, kind, i, seed)?);
        }
    }
    let max_rel_error = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckSummary {
        tolerance: cfg.gradcheck.tolerance,
        epsilon: cfg.gradcheck.epsilon,
        max_rel_error,
        passed: max_rel_error < cfg.gradcheck.tolerance,
        cases,
    })
}

pub fn gradcheck(cfg: &ExperimentConfig) -> Result<GradcheckSummary> {
    write_manifest(cfg, "gradcheck")?;
    let summary = gradcheck_sweep(cfg)?;
    write_json(&cfg.experiment.out_dir.join(GRADCHECK_FILE), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamRow {
    pub scheme: SchemeKind,
    pub count: ParamCount,
}

/// Trainable entries of each scheme on the configured model, summed over
/// adapted layers. Each total is cross-checked against a built model.
pub fn paramcount(cfg: &ExperimentConfig) -> Result<Vec<ParamRow>> {
    let widths = cfg.model.widths();
    let registry = SchemeRegistry::builtin();
    SchemeKind::ALL
        .iter()
        .map(|&kind| {
            let mut count = ParamCount::default();
            for (l, w) in widths.windows(2).enumerate() {
                if !cfg.model.adapt_layers.get(l).copied().unwrap_or(true) {
                    continue;
                }
                let c = param_count(kind, w[0], w[1], cfg.adapter.rank, cfg.data.num_tasks, cfg.adapter.num_experts);
                count.down += c.down;
                count.up += c.up;
                count.gate += c.gate;
            }
            let mut oracle_cfg = cfg.clone();
            oracle_cfg.adapter.routing = Routing::Oracle;
            let built = build_model(&oracle_cfg, &registry, kind, 0)?;
            let enumerated: usize = built.parameters().iter().map(|(_, p)| p.len()).sum();
            if enumerated != count.total() {
                return Err(Error::InvalidParameter(format!(
                    "{kind}: formula gives {} but the model has {enumerated} trainable entries",
                    count.total()
                )));
            }
            Ok(ParamRow { scheme: kind, count })
        })
        .collect()
}

/// Writes the configured tasks' samples (`data.num_samples` each) as a
/// flat binary file.
pub fn export_data(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let seed = primary_seed(cfg);
    write_manifest(cfg, "export-data")?;
    let host = build_host(cfg, seed)?;
    let tasks = build_tasks(cfg, seed)?;
    let path = cfg.experiment.out_dir.join(DATASET_FILE);
    Dataset::materialize(&tasks, &host, seed)?.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{read_records, read_reports};

    fn cfg(dir: &Path) -> ExperimentConfig {
        ExperimentConfig::parse_with_overrides(
            "",
            &[
                format!("experiment.out_dir={:?}", dir.display().to_string()),
                "model.d_in=4".into(),
                "model.hidden=[5]".into(),
                "model.d_out=3".into(),
                "adapter.rank=2".into(),
                "train.steps=12".into(),
                "train.eval_batches=2".into(),
                "train.eval_batch_size=8".into(),
                "data.batch_size=4".into(),
                "data.num_samples=10".into(),
                "gradcheck.configs=3".into(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn train_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg(dir.path());
        let report = train(&cfg, None).unwrap();
        for f in [METRICS_FILE, CHECKPOINT_FILE, REPORT_FILE, MANIFEST_FILE] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let records = read_records(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(records.iter().filter(|r| r["kind"] == "step").count(), 12);
        assert_eq!(read_reports(&records).unwrap(), vec![report.clone()]);

        let eval = evaluate_checkpoint(&cfg, None).unwrap();
        assert_eq!(eval.per_task_loss, report.per_task_loss);
        assert_eq!(eval.steps, 12);
    }

    #[test]
    fn resume_reaches_the_same_report() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let full = train(&cfg(a.path()), None).unwrap();

        let mut half = cfg(b.path());
        half.train.steps = 6;
        train(&half, None).unwrap();
        let resumed = train(&cfg(b.path()), Some(&b.path().join(CHECKPOINT_FILE))).unwrap();
        assert_eq!(
            RunReport {
                wall_clock_secs: 0.0,
                ..resumed
            },
            RunReport {
                wall_clock_secs: 0.0,
                ..full
            }
        );
    }

    #[test]
    fn compare_writes_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = cfg(dir.path());
        cfg.experiment.seeds = vec![0, 1];
        let table = compare(&cfg).unwrap();
        assert_eq!(table.rows.len(), 4);
        let csv = fs::read_to_string(dir.path().join(COMPARISON_CSV)).unwrap();
        assert_eq!(csv.lines().count(), 5);
        let records = read_records(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(read_reports(&records).unwrap().len(), 8);
    }

    #[test]
    fn gradcheck_passes() {
        let dir = tempfile::tempdir().unwrap();
        let summary = gradcheck(&cfg(dir.path())).unwrap();
        assert_eq!(summary.cases.len(), 12);
        assert!(summary.passed, "{}", summary.max_rel_error);
        assert!(dir.path().join(GRADCHECK_FILE).exists());
    }

    #[test]
    fn paramcount_example() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::parse_with_overrides(
            "",
            &[
                format!("experiment.out_dir={:?}", dir.path().display().to_string()),
                "model.d_in=8".into(),
                "model.hidden=[]".into(),
                "model.d_out=8".into(),
                "adapter.rank=2".into(),
                "data.num_tasks=3".into(),
            ],
        )
        .unwrap();
        let rows = paramcount(&cfg).unwrap();
        let total = |k: SchemeKind| rows.iter().find(|r| r.scheme == k).unwrap().count.total();
        assert_eq!(total(SchemeKind::Lora), 32);
        assert_eq!(total(SchemeKind::MoeLora), 96);
        assert_eq!(total(SchemeKind::AsymLora), 64);
        assert_eq!(total(SchemeKind::MoeAsymLora), 16 + 96 + 18);
    }

    #[test]
    fn export_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg(dir.path());
        let path = export_data(&cfg).unwrap();
        let ds = Dataset::load(&path).unwrap();
        assert_eq!(ds.tasks.len(), 3);
        assert_eq!(ds.tasks[0].len(), 10);
        assert_eq!((ds.d_in, ds.d_out), (4, 3));
    }
}
