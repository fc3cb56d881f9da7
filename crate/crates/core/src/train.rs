//! Round-robin multi-task training, held-out evaluation and multi-seed
//! scheme comparison.

use std::collections::VecDeque;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{entropy, param_count, ParamCount, SchemeKind, SchemeRegistry};
use crate::autograd::{backward, mse};
use crate::config::ExperimentConfig;
use crate::data::{generate_tasks, sample_batch, TaskSpec};
use crate::error::{Error, Result};
use crate::host::{ForwardCache, HostModel};
use crate::linalg::Rng;
use crate::optim::{Optimizer, OptimizerRegistry, OptimizerState};

/// Worker threads for comparisons are capped by this variable (0 or unset
/// means one per core).
pub const THREADS_ENV: &str = "ASYMLORA_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub task: usize,
    pub loss: f64,
    /// Mean entropy (nats) of the gate distributions used this step.
    pub gate_entropy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub steps: u64,
    pub batch_size: usize,
    pub eval_batches: usize,
    pub eval_batch_size: usize,
}

impl TrainOptions {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            steps: cfg.train.steps,
            batch_size: cfg.data.batch_size,
            eval_batches: cfg.train.eval_batches,
            eval_batch_size: cfg.train.eval_batch_size,
        }
    }
}

fn mean_gate_entropy(cache: &ForwardCache) -> Option<f64> {
    let hs: Vec<f64> = cache
        .adapters
        .iter()
        .flatten()
        .filter_map(|c| c.gate.as_ref())
        .map(|g| entropy(&g.probs))
        .collect();
    (!hs.is_empty()).then(|| hs.iter().sum::<f64>() / hs.len() as f64)
}

/// Trains the adapters of a host model on a fixed task list. Step `t` uses
/// task `t mod N`; batches come from the trainer's data stream.
#[derive(Debug)]
pub struct Trainer {
    model: HostModel,
    tasks: Vec<TaskSpec>,
    optimizer: Box<dyn Optimizer>,
    data_rng: Rng,
    step: u64,
    batch_size: usize,
    recent: VecDeque<f64>,
}

impl Trainer {
    pub fn new(
        model: HostModel,
        tasks: Vec<TaskSpec>,
        optimizer: Box<dyn Optimizer>,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::resume(model, tasks, optimizer, batch_size, Rng::derive(seed, "data"), 0)
    }

    /// Continues from a saved position: `data_rng` and `step` as they were
    /// after the last completed step.
    pub fn resume(
        model: HostModel,
        tasks: Vec<TaskSpec>,
        optimizer: Box<dyn Optimizer>,
        batch_size: usize,
        data_rng: Rng,
        step: u64,
    ) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::InvalidParameter("training needs at least one task".into()));
        }
        if batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be >= 1".into()));
        }
        for (i, t) in tasks.iter().enumerate() {
            if t.task_index != i {
                return Err(Error::InvalidParameter(format!(
                    "task at position {i} has index {}",
                    t.task_index
                )));
            }
            model.adapters().try_for_each(|(_, a)| a.spec().check_task(i))?;
        }
        Ok(Self {
            model,
            tasks,
            optimizer,
            data_rng,
            step,
            batch_size,
            recent: VecDeque::with_capacity(SMOOTHING_WINDOW),
        })
    }

    /// Seeds the smoothing window, oldest first; used when resuming.
    pub fn with_recent_losses(mut self, losses: &[f64]) -> Self {
        self.recent.clear();
        for &l in losses.iter().rev().take(SMOOTHING_WINDOW).rev() {
            self.recent.push_back(l);
        }
        self
    }

    /// Training losses of the last `SMOOTHING_WINDOW` steps, oldest first.
    pub fn recent_losses(&self) -> Vec<f64> {
        self.recent.iter().copied().collect()
    }

    pub fn smoothed_loss(&self) -> f64 {
        if self.recent.is_empty() {
            return f64::NAN;
        }
        self.recent.iter().sum::<f64>() / self.recent.len() as f64
    }

    pub fn model(&self) -> &HostModel {
        &self.model
    }

    pub fn into_model(self) -> HostModel {
        self.model
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn data_rng(&self) -> &Rng {
        &self.data_rng
    }

    pub fn optimizer_state(&self) -> OptimizerState {
        self.optimizer.state()
    }

    pub fn next_task(&self) -> usize {
        (self.step % self.tasks.len() as u64) as usize
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let task = self.next_task();
        let batch = sample_batch(&self.tasks[task], &self.model, self.batch_size, &mut self.data_rng)?;
        let (out, cache) = self.model.forward(task, &batch.inputs)?;
        let loss = mse(&out, &batch.targets)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                task,
                loss,
            });
        }
        let (_, grads) = backward(&self.model, &batch, &cache)?;
        let mut params = self.model.parameters_mut();
        self.optimizer.step(&mut params, grads.tensors())?;
        let record = StepRecord {
            step: self.step,
            task,
            loss,
            gate_entropy: mean_gate_entropy(&cache),
        };
        if self.recent.len() == SMOOTHING_WINDOW {
            self.recent.pop_front();
        }
        self.recent.push_back(loss);
        self.step += 1;
        Ok(record)
    }

    /// Runs `steps` more steps, handing each record to `on_step`.
    pub fn run(&mut self, steps: u64, mut on_step: impl FnMut(&StepRecord) -> Result<()>) -> Result<Vec<StepRecord>> {
        let mut trace = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let r = self.step()?;
            on_step(&r)?;
            trace.push(r);
        }
        Ok(trace)
    }
}

/// Gate behaviour of one adapter site on one task's held-out batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateUsage {
    pub layer: usize,
    pub task: usize,
    pub mean_weights: Vec<f64>,
    /// How often each expert carried the largest weight.
    pub argmax_counts: Vec<usize>,
    pub mean_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_task_loss: Vec<f64>,
    pub gate_usage: Vec<GateUsage>,
}

impl Evaluation {
    pub fn mean_loss(&self) -> f64 {
        self.per_task_loss.iter().sum::<f64>() / self.per_task_loss.len() as f64
    }
}

/// Held-out MSE per task. Task `i` draws its batches from
/// `derive(seed, "eval.i")`, independent of training data and of the
/// other tasks. The model is not modified.
pub fn evaluate(
    model: &HostModel,
    tasks: &[TaskSpec],
    num_batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Evaluation> {
    if num_batches == 0 || batch_size == 0 {
        return Err(Error::InvalidParameter("evaluation needs a non-empty batch".into()));
    }
    let mut per_task_loss = Vec::with_capacity(tasks.len());
    let mut gate_usage = Vec::new();
    for spec in tasks {
        let mut rng = Rng::derive(seed, &format!("eval.{}", spec.task_index));
        let mut total = 0.0;
        let mut usage: Vec<GateUsage> = Vec::new();
        for _ in 0..num_batches {
            let batch = sample_batch(spec, model, batch_size, &mut rng)?;
            let (out, cache) = model.forward(spec.task_index, &batch.inputs)?;
            total += mse(&out, &batch.targets)?;
            for (layer, c) in cache.adapters.iter().enumerate() {
                let Some(g) = c.as_ref().and_then(|c| c.gate.as_ref()) else {
                    continue;
                };
                let slot = match usage.iter_mut().find(|u| u.layer == layer) {
                    Some(u) => u,
                    None => {
                        usage.push(GateUsage {
                            layer,
                            task: spec.task_index,
                            mean_weights: vec![0.0; g.applied.len()],
                            argmax_counts: vec![0; g.applied.len()],
                            mean_entropy: 0.0,
                        });
                        usage.last_mut().expect("just pushed")
                    }
                };
                for (m, w) in slot.mean_weights.iter_mut().zip(&g.applied) {
                    *m += w / num_batches as f64;
                }
                let top = g
                    .probs
                    .iter()
                    .enumerate()
                    .fold(0, |best, (j, &p)| if p > g.probs[best] { j } else { best });
                slot.argmax_counts[top] += 1;
                slot.mean_entropy += entropy(&g.probs) / num_batches as f64;
            }
        }
        per_task_loss.push(total / num_batches as f64);
        gate_usage.extend(usage);
    }
    Ok(Evaluation {
        per_task_loss,
        gate_usage,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteParams {
    pub layer: usize,
    #[serde(flatten)]
    pub count: ParamCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scheme: String,
    pub seed: u64,
    pub steps: u64,
    pub per_task_loss: Vec<f64>,
    pub mean_loss: f64,
    /// Sum of the per-task losses.
    pub total_loss: f64,
    pub trainable_params: usize,
    pub param_counts: Vec<SiteParams>,
    /// Mean training loss over the last `SMOOTHING_WINDOW` steps.
    pub final_train_loss: f64,
    /// Mean gate entropy on held-out data, over layers and tasks.
    pub mean_gate_entropy: Option<f64>,
    pub gate_usage: Vec<GateUsage>,
    pub wall_clock_secs: f64,
}

pub fn site_params(model: &HostModel) -> Vec<SiteParams> {
    model
        .adapters()
        .map(|(layer, a)| {
            let s = a.spec();
            let mut count = param_count(s.kind, s.d_in, s.d_out, s.rank, s.num_tasks, s.num_experts);
            let extra = a.num_trainable() - count.total();
            count.gate += extra;
            SiteParams { layer, count }
        })
        .collect()
}

pub const SMOOTHING_WINDOW: usize = 100;

/// Mean loss of the first and last `SMOOTHING_WINDOW` records (fewer if the
/// trace is shorter).
pub fn smoothed_ends(trace: &[StepRecord]) -> (f64, f64) {
    if trace.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let k = SMOOTHING_WINDOW.min(trace.len());
    let mean = |s: &[StepRecord]| s.iter().map(|r| r.loss).sum::<f64>() / k as f64;
    (mean(&trace[..k]), mean(&trace[trace.len() - k..]))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: HostModel,
    pub report: RunReport,
    pub trace: Vec<StepRecord>,
}

/// Trains for `opts.steps`, then evaluates on held-out data.
pub fn train(
    model: HostModel,
    tasks: Vec<TaskSpec>,
    optimizer: Box<dyn Optimizer>,
    opts: &TrainOptions,
    seed: u64,
    on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    let start = Instant::now();
    let scheme = scheme_label(&model);
    let mut trainer = Trainer::new(model, tasks, optimizer, opts.batch_size, seed)?;
    let trace = trainer.run(opts.steps, on_step)?;
    let report = report_for(&trainer, &scheme, seed, opts, start)?;
    Ok(TrainOutcome {
        model: trainer.into_model(),
        report,
        trace,
    })
}

pub fn scheme_label(model: &HostModel) -> String {
    model
        .adapters()
        .next()
        .map(|(_, a)| a.kind().name().to_string())
        .unwrap_or_else(|| "none".into())
}

/// Evaluates the trainer's current model and assembles a report.
pub fn report_for(
    trainer: &Trainer,
    scheme: &str,
    seed: u64,
    opts: &TrainOptions,
    start: Instant,
) -> Result<RunReport> {
    let model = trainer.model();
    let eval = evaluate(model, trainer.tasks(), opts.eval_batches, opts.eval_batch_size, seed)?;
    let entropies: Vec<f64> = eval.gate_usage.iter().map(|g| g.mean_entropy).collect();
    Ok(RunReport {
        scheme: scheme.to_string(),
        seed,
        steps: trainer.steps_done(),
        mean_loss: eval.mean_loss(),
        total_loss: eval.per_task_loss.iter().sum(),
        per_task_loss: eval.per_task_loss,
        trainable_params: model.num_trainable(),
        param_counts: site_params(model),
        final_train_loss: trainer.smoothed_loss(),
        mean_gate_entropy: (!entropies.is_empty()).then(|| entropies.iter().sum::<f64>() / entropies.len() as f64),
        gate_usage: eval.gate_usage,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Frozen host for `seed`, drawn from `derive(seed, "host")`.
pub fn build_host(cfg: &ExperimentConfig, seed: u64) -> Result<HostModel> {
    HostModel::random(&cfg.model.widths(), &mut Rng::derive(seed, "host"))
}

/// Host with freshly initialized adapters of `kind`. Every scheme sees the
/// same host and the same per-layer init streams for a given seed.
pub fn build_model(cfg: &ExperimentConfig, registry: &SchemeRegistry, kind: SchemeKind, seed: u64) -> Result<HostModel> {
    let mut model = build_host(cfg, seed)?;
    model.attach_scheme(registry, &cfg.adapter_spec(kind), &cfg.model.adapt_layers, seed)?;
    Ok(model)
}

pub fn build_tasks(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<TaskSpec>> {
    generate_tasks(&cfg.task_gen(), seed)
}

/// Full single run of `kind` from a config.
pub fn run_scheme(
    cfg: &ExperimentConfig,
    kind: SchemeKind,
    seed: u64,
    on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    let model = build_model(cfg, &SchemeRegistry::builtin(), kind, seed)?;
    let tasks = build_tasks(cfg, seed)?;
    let optimizer = OptimizerRegistry::builtin().build(&cfg.optimizer)?;
    train(model, tasks, optimizer, &TrainOptions::from_config(cfg), seed, on_step)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeSummary {
    pub scheme: String,
    pub trainable_params: Option<usize>,
    /// Mean held-out loss per seed, in seed order; `None` where the run failed.
    pub per_seed: Vec<Option<f64>>,
    pub mean: f64,
    /// Sample standard deviation over successful seeds.
    pub std: f64,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<SchemeSummary>,
    pub reports: Vec<RunReport>,
}

impl ComparisonTable {
    pub fn row(&self, scheme: &str) -> Option<&SchemeSummary> {
        self.rows.iter().find(|r| r.scheme == scheme)
    }

    /// `(seeds where a < b, seeds where both ran)`.
    pub fn wins(&self, a: &str, b: &str) -> (usize, usize) {
        let (Some(ra), Some(rb)) = (self.row(a), self.row(b)) else {
            return (0, 0);
        };
        ra.per_seed
            .iter()
            .zip(&rb.per_seed)
            .filter_map(|(x, y)| Some((*x)?.lt(&(*y)?)))
            .fold((0, 0), |(w, n), win| (w + win as usize, n + 1))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scheme,trainable_params,mean_loss,std_loss,failures");
        for s in &self.seeds {
            out.push_str(&format!(",seed_{s}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.16e},{:.16e},{}",
                r.scheme,
                r.trainable_params.map(|p| p.to_string()).unwrap_or_default(),
                r.mean,
                r.std,
                r.failures.len()
            ));
            for v in &r.per_seed {
                out.push(',');
                if let Some(v) = v {
                    out.push_str(&format!("{v:.16e}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Two-sided exact sign-test p-value for `wins` successes out of `n`.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let k = wins.min(n - wins);
    let mut tail = 0.0;
    let mut c = 1.0;
    for i in 0..=k {
        if i > 0 {
            c = c * (n - i + 1) as f64 / i as f64;
        }
        tail += c;
    }
    (2.0 * tail / 2f64.powi(n as i32)).min(1.0)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

/// Trains every scheme in `cfg.compare.schemes` on every seed. All schemes
/// share data, host and init streams for a seed. A failing cell is recorded
/// in its row and does not stop the others.
pub fn compare_schemes(cfg: &ExperimentConfig) -> Result<ComparisonTable> {
    let kinds: Vec<SchemeKind> = cfg
        .compare
        .schemes
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_>>()?;
    let seeds = cfg.experiment.seeds.clone();
    let cells: Vec<(SchemeKind, u64)> = kinds
        .iter()
        .flat_map(|&k| seeds.iter().map(move |&s| (k, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<RunReport>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(k, s)| run_scheme(cfg, k, s, |_| Ok(())).map(|o| o.report))
            .collect()
    });

    let mut rows = Vec::with_capacity(kinds.len());
    let mut reports = Vec::new();
    let mut it = outcomes.into_iter();
    for kind in &kinds {
        let mut per_seed = Vec::with_capacity(seeds.len());
        let mut failures = Vec::new();
        let mut params = None;
        for seed in &seeds {
            match it.next().expect("one outcome per cell") {
                Ok(r) => {
                    per_seed.push(Some(r.mean_loss));
                    params = Some(r.trainable_params);
                    reports.push(r);
                }
                Err(e) => {
                    log::warn!("{} seed {seed} failed: {e}", kind.name());
                    per_seed.push(None);
                    failures.push(format!("seed {seed}: {e}"));
                }
            }
        }
        let ok: Vec<f64> = per_seed.iter().flatten().copied().collect();
        let (mean, std) = mean_std(&ok);
        rows.push(SchemeSummary {
            scheme: kind.name().to_string(),
            trainable_params: params,
            per_seed,
            mean,
            std,
            failures,
        });
    }
    Ok(ComparisonTable { seeds, rows, reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig::parse_with_overrides(
            "",
            &[
                "model.d_in=6".into(),
                "model.hidden=[8]".into(),
                "model.d_out=5".into(),
                "adapter.rank=2".into(),
                "train.steps=30".into(),
                "train.eval_batches=2".into(),
                "train.eval_batch_size=16".into(),
                "data.batch_size=8".into(),
                "optimizer.learning_rate=0.01".into(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn round_robin_order() {
        let cfg = small_cfg();
        let out = run_scheme(&cfg, SchemeKind::AsymLora, 1, |_| Ok(())).unwrap();
        let tasks: Vec<usize> = out.trace.iter().map(|r| r.task).collect();
        assert_eq!(&tasks[..6], &[0, 1, 2, 0, 1, 2]);
        assert_eq!(out.report.steps, 30);
        assert_eq!(out.report.per_task_loss.len(), 3);
        assert!((out.report.total_loss - 3.0 * out.report.mean_loss).abs() < 1e-12);
    }

    #[test]
    fn evaluation_does_not_mutate() {
        let cfg = small_cfg();
        let model = build_model(&cfg, &SchemeRegistry::builtin(), SchemeKind::MoeAsymLora, 2).unwrap();
        let tasks = build_tasks(&cfg, 2).unwrap();
        let before: Vec<_> = model.parameters().into_iter().map(|(_, p)| p.clone()).collect();
        let version = model.version();
        let e1 = evaluate(&model, &tasks, 2, 8, 9).unwrap();
        let e2 = evaluate(&model, &tasks, 2, 8, 9).unwrap();
        assert_eq!(e1, e2);
        let after: Vec<_> = model.parameters().into_iter().map(|(_, p)| p.clone()).collect();
        assert_eq!(before, after);
        assert_eq!(version, model.version());
        assert_eq!(e1.gate_usage.len(), 2 * 3);
        for u in &e1.gate_usage {
            assert!((u.mean_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(u.argmax_counts.iter().sum::<usize>(), 2);
        }
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut cfg = small_cfg();
        cfg.optimizer.kind = "sgd".into();
        cfg.optimizer.learning_rate = 1e6;
        let err = run_scheme(&cfg, SchemeKind::Lora, 0, |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
    }

    #[test]
    fn sign_test_values() {
        assert!((sign_test_p(5, 5) - 0.0625).abs() < 1e-15);
        assert!((sign_test_p(0, 5) - 0.0625).abs() < 1e-15);
        assert!((sign_test_p(4, 5) - 0.375).abs() < 1e-15);
        assert_eq!(sign_test_p(0, 0), 1.0);
        assert_eq!(sign_test_p(1, 2), 1.0);
    }

    #[test]
    fn mean_std_matches_hand_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn comparison_isolates_failures() {
        let mut cfg = small_cfg();
        cfg.experiment.seeds = vec![0, 1];
        cfg.compare.schemes = vec!["lora".into(), "asymlora".into()];
        let table = compare_schemes(&cfg).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.reports.len(), 4);
        let (_, n) = table.wins("asymlora", "lora");
        assert_eq!(n, 2);
        let csv = table.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("scheme,trainable_params,mean_loss,std_loss,failures,seed_0,seed_1"));

        cfg.optimizer.kind = "sgd".into();
        cfg.optimizer.learning_rate = 1e6;
        let table = compare_schemes(&cfg).unwrap();
        assert!(table.rows.iter().all(|r| r.failures.len() == 2 && r.mean.is_nan()));
    }
}
