use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use asymlora::config::ExperimentConfig;
use asymlora::runner;
use asymlora::train::{sign_test_p, THREADS_ENV};
use clap::{Args, Parser, Subcommand};
use log::info;

/// Train and compare shared-A / task-specific-B low-rank adapters on
/// synthetic multi-task regression.
#[derive(Debug, Parser)]
#[command(name = "asymlora", version)]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run with this single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override a config entry, e.g. `--set data.conflict=0.9`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Adapter scheme: lora, moe-lora, asymlora, moe-asymlora.
    #[arg(long, global = true)]
    scheme: Option<String>,

    /// Training steps.
    #[arg(long, global = true)]
    steps: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one scheme and write metrics, a report and a checkpoint.
    Train {
        /// Continue from this checkpoint up to the configured step count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out data.
    Evaluate {
        /// Defaults to `<out>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every scheme on every seed and tabulate held-out losses.
    Compare,
    /// Check analytic gradients against finite differences.
    Gradcheck,
    /// Print trainable parameter counts for each scheme.
    Paramcount,
    /// Write the configured tasks' samples as a flat binary file.
    ExportData,
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let text = match &c.config {
        Some(path) => std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        None => String::new(),
    };
    let mut cfg = ExperimentConfig::parse_with_overrides(&text, &c.overrides).with_context(|| match &c.config {
        Some(path) => format!("invalid config {}", path.display()),
        None => "invalid config".to_string(),
    })?;
    if let Some(seed) = c.seed {
        cfg.experiment.seeds = vec![seed];
    }
    if let Some(out) = &c.out {
        cfg.experiment.out_dir = out.clone();
    }
    if let Some(scheme) = &c.scheme {
        cfg.adapter.scheme = scheme.clone();
    }
    if let Some(steps) = c.steps {
        cfg.train.steps = steps;
    }
    cfg.validate().context("invalid command-line override")?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli.common)?;
    let out = cfg.experiment.out_dir.display().to_string();
    match cli.command {
        Command::Train { resume } => {
            info!("training {} for {} steps", cfg.adapter.scheme, cfg.train.steps);
            let r = runner::train(&cfg, resume.as_deref())?;
            println!("scheme      {}", r.scheme);
            println!("seed        {}", r.seed);
            println!("steps       {}", r.steps);
            println!("params      {}", r.trainable_params);
            for (i, l) in r.per_task_loss.iter().enumerate() {
                println!("task {i:<6} {l:.6e}");
            }
            println!("mean loss   {:.6e}", r.mean_loss);
            println!("artifacts   {out}");
        }
        Command::Evaluate { checkpoint } => {
            let r = runner::evaluate_checkpoint(&cfg, checkpoint.as_deref())?;
            for (i, l) in r.per_task_loss.iter().enumerate() {
                println!("task {i:<6} {l:.6e}");
            }
            println!("mean loss   {:.6e}", r.mean_loss);
        }
        Command::Compare => {
            info!(
                "comparing {} schemes over {} seeds ({THREADS_ENV}={})",
                cfg.compare.schemes.len(),
                cfg.experiment.seeds.len(),
                std::env::var(THREADS_ENV).unwrap_or_default()
            );
            let table = runner::compare(&cfg)?;
            println!("{:<14}{:>8}{:>14}{:>14}  failed", "scheme", "params", "mean", "std");
            for r in &table.rows {
                println!(
                    "{:<14}{:>8}{:>14.6e}{:>14.6e}  {}",
                    r.scheme,
                    r.trainable_params.map(|p| p.to_string()).unwrap_or_else(|| "-".into()),
                    r.mean,
                    r.std,
                    r.failures.len()
                );
            }
            if table.row("asymlora").is_some() {
                for other in ["lora", "moe-lora"] {
                    let (w, n) = table.wins("asymlora", other);
                    if n > 0 {
                        println!("asymlora < {other} on {w}/{n} seeds (sign test p = {:.4})", sign_test_p(w, n));
                    }
                }
            }
            println!("wrote {out}/{}", runner::COMPARISON_CSV);
            if table.rows.iter().any(|r| !r.failures.is_empty()) {
                for r in &table.rows {
                    for f in &r.failures {
                        eprintln!("{}: {f}", r.scheme);
                    }
                }
                return Ok(ExitCode::from(2));
            }
        }
        Command::Gradcheck => {
            let s = runner::gradcheck(&cfg)?;
            for name in &cfg.gradcheck.schemes {
                let worst = s
                    .cases
                    .iter()
                    .filter(|c| &c.scheme == name)
                    .map(|c| c.max_rel_error)
                    .fold(0.0, f64::max);
                println!("{name:<14} max relative error {worst:.3e}");
            }
            if !s.passed {
                bail!(
                    "gradient check failed: max relative error {:.3e} is not below {:.1e}",
                    s.max_rel_error,
                    s.tolerance
                );
            }
            println!("ok: {} configs below {:.1e}", s.cases.len(), s.tolerance);
        }
        Command::Paramcount => {
            for row in runner::paramcount(&cfg)? {
                let c = row.count;
                println!(
                    "{:<13} {:>8}   A {:>6}  B {:>6}  gate {:>6}",
                    row.scheme.display_name(),
                    c.total(),
                    c.down,
                    c.up,
                    c.gate
                );
            }
        }
        Command::ExportData => {
            let path = runner::export_data(&cfg)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
