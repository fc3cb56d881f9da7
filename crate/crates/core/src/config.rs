//! Declarative experiment description.
//!
//! Configs are line-oriented `key = value` files with `[section]` headers
//! (TOML). Every section and key is optional; missing values take the
//! defaults below. Unknown keys are rejected.
//!
//! ```toml
//! [experiment]
//! name = "conflict"
//! seeds = [0, 1, 2, 3, 4]
//! out_dir = "runs/conflict"
//!
//! [model]
//! d_in = 16
//! hidden = [32]
//! d_out = 16
//!
//! [adapter]
//! scheme = "asymlora"
//! rank = 4
//! num_experts = 2
//!
//! [data]
//! num_tasks = 3
//! commonality = 0.3
//! conflict = 0.9
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{AdapterSpec, Mixing, Routing, SchemeKind, SchemeRegistry};
use crate::data::TaskGenConfig;
use crate::error::{Error, Result};
use crate::optim::{OptimizerConfig, OptimizerRegistry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seeds: vec![0],
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_in: usize,
    pub hidden: Vec<usize>,
    pub d_out: usize,
    /// Per-layer opt-in; empty means every layer is adapted.
    pub adapt_layers: Vec<bool>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_in: 16,
            hidden: vec![32],
            d_out: 16,
            adapt_layers: Vec::new(),
        }
    }
}

impl ModelSection {
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.d_in];
        w.extend(&self.hidden);
        w.push(self.d_out);
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSection {
    pub scheme: String,
    pub rank: usize,
    pub num_experts: usize,
    pub scale: f64,
    pub routing: Routing,
    pub mixing: Mixing,
}

impl Default for AdapterSection {
    fn default() -> Self {
        Self {
            scheme: "asymlora".into(),
            rank: 4,
            num_experts: 2,
            scale: 1.0,
            routing: Routing::Oracle,
            mixing: Mixing::Soft,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub num_tasks: usize,
    pub commonality: f64,
    pub conflict: f64,
    pub noise_std: f64,
    /// Defaults to the adapter rank.
    pub teacher_rank: Option<usize>,
    /// Frobenius norm of each teacher update; defaults to `sqrt(d_out)`.
    pub teacher_norm: Option<f64>,
    pub batch_size: usize,
    /// Examples per task when exporting a dataset file.
    pub num_samples: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            num_tasks: 3,
            commonality: 0.5,
            conflict: 0.5,
            noise_std: 0.1,
            teacher_rank: None,
            teacher_norm: None,
            batch_size: 32,
            num_samples: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: u64,
    pub eval_batches: usize,
    pub eval_batch_size: usize,
    /// Write a training record every `log_every` steps.
    pub log_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 2000,
            eval_batches: 8,
            eval_batch_size: 256,
            log_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    pub schemes: Vec<String>,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            schemes: SchemeKind::ALL.iter().map(|k| k.name().to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub schemes: Vec<String>,
    pub configs: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    pub max_dim: usize,
    pub max_rank: usize,
    pub max_tasks: usize,
    pub max_experts: usize,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            schemes: SchemeKind::ALL.iter().map(|k| k.name().to_string()).collect(),
            configs: 20,
            epsilon: 1e-5,
            tolerance: 1e-4,
            max_dim: 8,
            max_rank: 3,
            max_tasks: 3,
            max_experts: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub model: ModelSection,
    pub adapter: AdapterSection,
    pub data: DataSection,
    pub optimizer: OptimizerConfig,
    pub train: TrainSection,
    pub compare: CompareSection,
    pub gradcheck: GradcheckSection,
}

fn parse_value(raw: &str) -> toml::Value {
    // Anything that is not a TOML literal is taken as a bare string.
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let (section, field) = key
        .split_once('.')
        .ok_or_else(|| Error::config(key, "override keys look like `section.key`"))?;
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let sub = entry
        .as_table_mut()
        .ok_or_else(|| Error::config(section, "not a section"))?;
    sub.insert(field.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    /// Parses `text`, applies `section.key=value` overrides, then validates.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| parse_error(text, e))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o.as_str(), "override must be `section.key=value`"))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn scheme(&self) -> Result<SchemeKind> {
        self.adapter.scheme.parse()
    }

    pub fn teacher_rank(&self) -> usize {
        self.data.teacher_rank.unwrap_or(self.adapter.rank)
    }

    pub fn task_gen(&self) -> TaskGenConfig {
        TaskGenConfig {
            num_tasks: self.data.num_tasks,
            commonality: self.data.commonality,
            conflict: self.data.conflict,
            d_in: self.model.d_in,
            d_out: self.model.d_out,
            teacher_rank: self.teacher_rank(),
            noise_std: self.data.noise_std,
            num_samples: self.data.num_samples,
            teacher_norm: self.data.teacher_norm.unwrap_or((self.model.d_out as f64).sqrt()),
        }
    }

    /// Adapter template for `kind`; per-layer dims are filled in on attach.
    pub fn adapter_spec(&self, kind: SchemeKind) -> AdapterSpec {
        AdapterSpec::new(kind, 0, 0, self.adapter.rank)
            .with_tasks(self.data.num_tasks)
            .with_experts(self.adapter.num_experts)
            .with_scale(self.adapter.scale)
            .with_routing(self.adapter.routing)
            .with_mixing(self.adapter.mixing)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.d_in == 0 {
            return Err(Error::config("model.d_in", "must be >= 1"));
        }
        if m.d_out == 0 {
            return Err(Error::config("model.d_out", "must be >= 1"));
        }
        if m.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "widths must be >= 1"));
        }
        let widths = m.widths();
        let layers = widths.len() - 1;
        if !m.adapt_layers.is_empty() && m.adapt_layers.len() != layers {
            return Err(Error::config(
                "model.adapt_layers",
                format!("expected {layers} entries, got {}", m.adapt_layers.len()),
            ));
        }
        let min_width = widths
            .windows(2)
            .enumerate()
            .filter(|(l, _)| m.adapt_layers.get(*l).copied().unwrap_or(true))
            .map(|(_, w)| w[0].min(w[1]))
            .min()
            .unwrap_or(usize::MAX);

        let a = &self.adapter;
        let registry = SchemeRegistry::builtin();
        if registry.get(&a.scheme).is_err() {
            return Err(Error::config(
                "adapter.scheme",
                format!("unknown scheme `{}` (known: {})", a.scheme, registry.names().join(", ")),
            ));
        }
        if a.rank == 0 || a.rank > min_width {
            return Err(Error::config("adapter.rank", format!("must be in 1..={min_width}")));
        }
        if a.num_experts == 0 {
            return Err(Error::config("adapter.num_experts", "must be >= 1"));
        }
        if !a.scale.is_finite() {
            return Err(Error::config("adapter.scale", "must be finite"));
        }

        let d = &self.data;
        if d.num_tasks == 0 {
            return Err(Error::config("data.num_tasks", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&d.commonality) {
            return Err(Error::config("data.commonality", "must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&d.conflict) {
            return Err(Error::config("data.conflict", "must be in [0, 1]"));
        }
        if !(d.noise_std >= 0.0 && d.noise_std.is_finite()) {
            return Err(Error::config("data.noise_std", "must be >= 0"));
        }
        let tr = self.teacher_rank();
        if tr == 0 || tr > m.d_in.min(m.d_out) {
            return Err(Error::config(
                "data.teacher_rank",
                format!("must be in 1..={}", m.d_in.min(m.d_out)),
            ));
        }
        if let Some(n) = d.teacher_norm {
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::config("data.teacher_norm", "must be > 0"));
            }
        }
        if d.batch_size == 0 {
            return Err(Error::config("data.batch_size", "must be >= 1"));
        }
        self.task_gen()
            .validate()
            .map_err(|e| Error::config("data", e.to_string()))?;

        let o = &self.optimizer;
        if OptimizerRegistry::builtin().build(o).is_err() {
            return Err(Error::config(
                "optimizer.kind",
                format!("unknown optimizer `{}` (known: sgd, adam)", o.kind),
            ));
        }
        if !(o.learning_rate >= 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::config("optimizer.learning_rate", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&o.beta1) {
            return Err(Error::config("optimizer.beta1", "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("optimizer.beta2", "must be in [0, 1)"));
        }
        if !(o.epsilon > 0.0) {
            return Err(Error::config("optimizer.epsilon", "must be > 0"));
        }

        let t = &self.train;
        if t.steps == 0 {
            return Err(Error::config("train.steps", "must be >= 1"));
        }
        if t.eval_batches == 0 || t.eval_batch_size == 0 {
            return Err(Error::config("train.eval_batches", "evaluation needs at least one non-empty batch"));
        }
        if t.log_every == 0 {
            return Err(Error::config("train.log_every", "must be >= 1"));
        }
        if self.experiment.seeds.is_empty() {
            return Err(Error::config("experiment.seeds", "need at least one seed"));
        }
        for s in &self.compare.schemes {
            if registry.get(s).is_err() {
                return Err(Error::config("compare.schemes", format!("unknown scheme `{s}`")));
            }
        }

        let g = &self.gradcheck;
        for s in &g.schemes {
            if registry.get(s).is_err() {
                return Err(Error::config("gradcheck.schemes", format!("unknown scheme `{s}`")));
            }
        }
        if !(g.epsilon > 0.0 && g.epsilon < 1e-2) {
            return Err(Error::config("gradcheck.epsilon", "must be in (0, 1e-2)"));
        }
        if g.max_dim < 2 || g.max_rank == 0 || g.max_tasks == 0 || g.max_experts == 0 {
            return Err(Error::config("gradcheck", "sweep bounds must be positive (max_dim >= 2)"));
        }
        Ok(())
    }
}

fn parse_error(text: &str, e: toml::de::Error) -> Error {
    let field = match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            format!("line {line}")
        }
        None => "config".to_string(),
    };
    Error::Config {
        field,
        message: e.message().to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gets_defaults() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.model.widths(), vec![16, 32, 16]);
        assert_eq!(cfg.adapter.rank, 4);
        assert_eq!(cfg.data.num_tasks, 3);
        assert_eq!(cfg.adapter.num_experts, 2);
        assert_eq!(cfg.optimizer.kind, "adam");
        assert_eq!(cfg.optimizer.learning_rate, 1e-3);
    }

    #[test]
    fn round_trip() {
        let text = r#"
[experiment]
name = "x"
seeds = [3, 4]

[adapter]
scheme = "moe-asymlora"
rank = 2
routing = "learned"
mixing = "top1"

[data]
commonality = 0.3
conflict = 0.9
teacher_norm = 2.5
"#;
        let cfg = ExperimentConfig::parse(text).unwrap();
        let again = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash(), again.hash());
        assert_eq!(cfg.adapter.routing, Routing::Learned);
    }

    #[test]
    fn overrides_apply() {
        let cfg = ExperimentConfig::parse_with_overrides(
            "",
            &[
                "adapter.scheme=lora".into(),
                "data.conflict = 0.25".into(),
                "model.hidden=[8, 8]".into(),
                "experiment.out_dir=/tmp/x".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.adapter.scheme, "lora");
        assert_eq!(cfg.data.conflict, 0.25);
        assert_eq!(cfg.model.hidden, vec![8, 8]);
        assert_eq!(cfg.experiment.out_dir, PathBuf::from("/tmp/x"));
        assert!(ExperimentConfig::parse_with_overrides("", &["nodot=1".into()]).is_err());
    }

    #[test]
    fn field_level_errors() {
        let field = |text: &str| match ExperimentConfig::parse(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(field("[adapter]\nrank = 0"), "adapter.rank");
        assert_eq!(field("[adapter]\nrank = 17"), "adapter.rank");
        assert_eq!(field("[adapter]\nscheme = \"dora\""), "adapter.scheme");
        assert_eq!(field("[data]\ncommonality = 1.5"), "data.commonality");
        assert_eq!(field("[optimizer]\nkind = \"lbfgs\"\nlearning_rate = 0.1"), "optimizer.kind");
        assert_eq!(field("[train]\nsteps = 0"), "train.steps");
        assert_eq!(field("[model]\nadapt_layers = [true]"), "model.adapt_layers");
        assert_eq!(field("\n\n[model\nd_in = 3"), "line 3");
        let unknown = ExperimentConfig::parse("[model]\nwidth = 3").unwrap_err().to_string();
        assert!(unknown.contains("width"), "{unknown}");
    }
}
