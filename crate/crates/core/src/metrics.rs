//! Append-only metrics log: one flat JSON object per line.
//!
//! Reals are written with 17 significant digits (`1.2345678901234567e-1`),
//! which round-trips every `f64` exactly. Each line has a `kind`:
//!
//! | kind | fields |
//! |---|---|
//! | `step` | scheme, seed, step, task, loss, gate_entropy |
//! | `eval` | scheme, seed, step, task, loss |
//! | `gate` | scheme, seed, layer, task, expert, weight, argmax_count, entropy |
//! | `params` | scheme, seed, layer, down, up, gate |
//! | `report` | scheme, seed, steps, num_tasks, mean_loss, total_loss, trainable_params, final_train_loss, mean_gate_entropy, wall_clock_secs |
//!
//! A report's `eval`, `gate` and `params` lines precede its `report` line, so
//! [`read_reports`] can rebuild every [`RunReport`] in the file.
//!
//! Plotting the training curve with pandas:
//!
//! ```text
//! df = pd.read_json("metrics.ndjson", lines=True)
//! df[df.kind == "step"].plot(x="step", y="loss", logy=True)
//! ```

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::adapters::ParamCount;
use crate::error::{Error, Result};
use crate::train::{GateUsage, RunReport, SiteParams, StepRecord};

/// Field name excluded when comparing logs across runs.
pub const WALL_CLOCK_FIELD: &str = "wall_clock_secs";

#[derive(Debug, Clone, PartialEq)]
pub enum Field {
    Int(u64),
    Real(f64),
    Text(String),
    Missing,
}

impl From<u64> for Field {
    fn from(v: u64) -> Self {
        Field::Int(v)
    }
}

impl From<usize> for Field {
    fn from(v: usize) -> Self {
        Field::Int(v as u64)
    }
}

impl From<f64> for Field {
    fn from(v: f64) -> Self {
        Field::Real(v)
    }
}

impl From<&str> for Field {
    fn from(v: &str) -> Self {
        Field::Text(v.to_string())
    }
}

impl From<Option<f64>> for Field {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Field::Missing, Field::Real)
    }
}

pub fn format_real(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        // JSON has no literal for these
        format!("\"{v}\"")
    }
}

/// Renders one record as a single JSON line (no trailing newline).
pub fn format_record(fields: &[(&str, Field)]) -> String {
    let mut out = String::from("{");
    for (i, (k, v)) in fields.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&serde_json::to_string(k).expect("string"));
        out.push(':');
        match v {
            Field::Int(n) => out.push_str(&n.to_string()),
            Field::Real(x) => out.push_str(&format_real(*x)),
            Field::Text(s) => out.push_str(&serde_json::to_string(s).expect("string")),
            Field::Missing => out.push_str("null"),
        }
    }
    out.push('}');
    out
}

pub fn step_record(scheme: &str, seed: u64, r: &StepRecord) -> String {
    format_record(&[
        ("kind", "step".into()),
        ("scheme", scheme.into()),
        ("seed", seed.into()),
        ("step", r.step.into()),
        ("task", r.task.into()),
        ("loss", r.loss.into()),
        ("gate_entropy", r.gate_entropy.into()),
    ])
}

/// Lines describing a finished run, ending with its `report` line.
pub fn report_records(r: &RunReport) -> Vec<String> {
    let mut lines = Vec::new();
    for (task, loss) in r.per_task_loss.iter().enumerate() {
        lines.push(format_record(&[
            ("kind", "eval".into()),
            ("scheme", r.scheme.as_str().into()),
            ("seed", r.seed.into()),
            ("step", r.steps.into()),
            ("task", task.into()),
            ("loss", (*loss).into()),
        ]));
    }
    for u in &r.gate_usage {
        for (expert, (w, c)) in u.mean_weights.iter().zip(&u.argmax_counts).enumerate() {
            lines.push(format_record(&[
                ("kind", "gate".into()),
                ("scheme", r.scheme.as_str().into()),
                ("seed", r.seed.into()),
                ("layer", u.layer.into()),
                ("task", u.task.into()),
                ("expert", expert.into()),
                ("weight", (*w).into()),
                ("argmax_count", (*c).into()),
                ("entropy", u.mean_entropy.into()),
            ]));
        }
    }
    for p in &r.param_counts {
        lines.push(format_record(&[
            ("kind", "params".into()),
            ("scheme", r.scheme.as_str().into()),
            ("seed", r.seed.into()),
            ("layer", p.layer.into()),
            ("down", p.count.down.into()),
            ("up", p.count.up.into()),
            ("gate", p.count.gate.into()),
        ]));
    }
    lines.push(format_record(&[
        ("kind", "report".into()),
        ("scheme", r.scheme.as_str().into()),
        ("seed", r.seed.into()),
        ("steps", r.steps.into()),
        ("num_tasks", r.per_task_loss.len().into()),
        ("mean_loss", r.mean_loss.into()),
        ("total_loss", r.total_loss.into()),
        ("trainable_params", r.trainable_params.into()),
        ("final_train_loss", r.final_train_loss.into()),
        ("mean_gate_entropy", r.mean_gate_entropy.into()),
        (WALL_CLOCK_FIELD, r.wall_clock_secs.into()),
    ]));
    lines
}

/// Appends lines to a metrics file, creating it if needed.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn append(path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }

    pub fn line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn step(&mut self, scheme: &str, seed: u64, r: &StepRecord) -> Result<()> {
        self.line(&step_record(scheme, seed, r))
    }

    pub fn report(&mut self, r: &RunReport) -> Result<()> {
        for l in report_records(r) {
            self.line(&l)?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl Drop for MetricsWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

pub type Record = Map<String, Value>;

pub fn parse_line(line: &str) -> Result<Record> {
    match serde_json::from_str(line) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(Error::InvalidParameter("metrics line is not an object".into())),
        Err(e) => Err(Error::InvalidParameter(format!("bad metrics line: {e}"))),
    }
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| l.map_err(|e| Error::io(path, e)))
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|l| parse_line(&l?))
        .collect()
}

fn real(r: &Record, key: &str) -> Result<f64> {
    match r.get(key) {
        Some(Value::Number(n)) => n.as_f64().ok_or_else(|| bad(key)),
        Some(Value::String(s)) => s.parse().map_err(|_| bad(key)),
        _ => Err(bad(key)),
    }
}

fn opt_real(r: &Record, key: &str) -> Result<Option<f64>> {
    match r.get(key) {
        None | Some(Value::Null) => Ok(None),
        _ => real(r, key).map(Some),
    }
}

fn int(r: &Record, key: &str) -> Result<u64> {
    r.get(key).and_then(Value::as_u64).ok_or_else(|| bad(key))
}

fn text<'a>(r: &'a Record, key: &str) -> Result<&'a str> {
    r.get(key).and_then(Value::as_str).ok_or_else(|| bad(key))
}

fn bad(key: &str) -> Error {
    Error::InvalidParameter(format!("metrics record has missing or malformed `{key}`"))
}

/// Rebuilds the step trace of `(scheme, seed)` from parsed records.
pub fn read_steps(records: &[Record], scheme: &str, seed: u64) -> Result<Vec<StepRecord>> {
    records
        .iter()
        .filter(|r| r.get("kind").and_then(Value::as_str) == Some("step"))
        .filter(|r| text(r, "scheme").ok() == Some(scheme) && int(r, "seed").ok() == Some(seed))
        .map(|r| {
            Ok(StepRecord {
                step: int(r, "step")?,
                task: int(r, "task")? as usize,
                loss: real(r, "loss")?,
                gate_entropy: opt_real(r, "gate_entropy")?,
            })
        })
        .collect()
}

/// Rebuilds every report in file order.
pub fn read_reports(records: &[Record]) -> Result<Vec<RunReport>> {
    let mut reports = Vec::new();
    let mut evals: Vec<(usize, f64)> = Vec::new();
    let mut gates: Vec<GateUsage> = Vec::new();
    let mut params: Vec<SiteParams> = Vec::new();
    for r in records {
        match text(r, "kind")? {
            "eval" => evals.push((int(r, "task")? as usize, real(r, "loss")?)),
            "gate" => {
                let (layer, task) = (int(r, "layer")? as usize, int(r, "task")? as usize);
                let expert = int(r, "expert")? as usize;
                if expert == 0 {
                    gates.push(GateUsage {
                        layer,
                        task,
                        mean_weights: Vec::new(),
                        argmax_counts: Vec::new(),
                        mean_entropy: real(r, "entropy")?,
                    });
                }
                let g = gates
                    .last_mut()
                    .filter(|g| g.layer == layer && g.task == task && g.mean_weights.len() == expert)
                    .ok_or_else(|| bad("expert"))?;
                g.mean_weights.push(real(r, "weight")?);
                g.argmax_counts.push(int(r, "argmax_count")? as usize);
            }
            "params" => params.push(SiteParams {
                layer: int(r, "layer")? as usize,
                count: ParamCount {
                    down: int(r, "down")? as usize,
                    up: int(r, "up")? as usize,
                    gate: int(r, "gate")? as usize,
                },
            }),
            "report" => {
                let n = int(r, "num_tasks")? as usize;
                let mut per_task_loss = vec![f64::NAN; n];
                for (t, l) in evals.drain(..) {
                    *per_task_loss.get_mut(t).ok_or_else(|| bad("task"))? = l;
                }
                reports.push(RunReport {
                    scheme: text(r, "scheme")?.to_string(),
                    seed: int(r, "seed")?,
                    steps: int(r, "steps")?,
                    per_task_loss,
                    mean_loss: real(r, "mean_loss")?,
                    total_loss: real(r, "total_loss")?,
                    trainable_params: int(r, "trainable_params")? as usize,
                    param_counts: std::mem::take(&mut params),
                    final_train_loss: real(r, "final_train_loss")?,
                    mean_gate_entropy: opt_real(r, "mean_gate_entropy")?,
                    gate_usage: std::mem::take(&mut gates),
                    wall_clock_secs: real(r, WALL_CLOCK_FIELD)?,
                });
            }
            _ => {}
        }
    }
    Ok(reports)
}

/// The file's lines with the wall-clock field removed, for run-to-run
/// comparison.
pub fn without_wall_clock(text: &str) -> Result<Vec<String>> {
    let key = format!("\"{WALL_CLOCK_FIELD}\":");
    Ok(text
        .lines()
        .map(|l| match l.find(&key) {
            Some(start) => {
                let rest = &l[start + key.len()..];
                let end = rest.find([',', '}']).unwrap_or(rest.len());
                format!("{}{}", &l[..start], &rest[end..]).replace(",}", "}")
            }
            None => l.to_string(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report() -> RunReport {
        RunReport {
            scheme: "moe-asymlora".into(),
            seed: 4,
            steps: 12,
            per_task_loss: vec![0.1, 1.0 / 3.0, 2.5e-7],
            mean_loss: (0.1 + 1.0 / 3.0 + 2.5e-7) / 3.0,
            total_loss: 0.1 + 1.0 / 3.0 + 2.5e-7,
            trainable_params: 99,
            param_counts: vec![SiteParams {
                layer: 0,
                count: ParamCount { down: 8, up: 48, gate: 10 },
            }],
            final_train_loss: std::f64::consts::PI,
            mean_gate_entropy: Some(0.69),
            gate_usage: vec![
                GateUsage {
                    layer: 0,
                    task: 0,
                    mean_weights: vec![0.25, 0.75],
                    argmax_counts: vec![1, 3],
                    mean_entropy: 0.5,
                },
                GateUsage {
                    layer: 1,
                    task: 0,
                    mean_weights: vec![0.5, 0.5],
                    argmax_counts: vec![2, 2],
                    mean_entropy: 0.69,
                },
            ],
            wall_clock_secs: 1.25,
        }
    }

    #[test]
    fn reals_round_trip_exactly() {
        for v in [0.1, 1.0 / 3.0, f64::MIN_POSITIVE, 1e300, -2.2250738585072014e-308, 123456789.123456789] {
            let s = format_real(v);
            let parsed = parse_line(&format!("{{\"x\":{s}}}")).unwrap();
            assert_eq!(real(&parsed, "x").unwrap().to_bits(), v.to_bits(), "{s}");
        }
        assert_eq!(format_real(0.1), "1.0000000000000001e-1");
    }

    #[test]
    fn report_round_trip() {
        let r = sample_report();
        let records: Vec<Record> = report_records(&r).iter().map(|l| parse_line(l).unwrap()).collect();
        assert_eq!(read_reports(&records).unwrap(), vec![r]);
    }

    #[test]
    fn step_lines_are_flat() {
        let r = StepRecord {
            step: 3,
            task: 1,
            loss: 0.5,
            gate_entropy: None,
        };
        let line = step_record("lora", 7, &r);
        assert_eq!(
            line,
            r#"{"kind":"step","scheme":"lora","seed":7,"step":3,"task":1,"loss":5.0000000000000000e-1,"gate_entropy":null}"#
        );
        let recs = vec![parse_line(&line).unwrap()];
        assert_eq!(read_steps(&recs, "lora", 7).unwrap(), vec![r]);
        assert!(read_steps(&recs, "lora", 8).unwrap().is_empty());
    }

    #[test]
    fn writer_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ndjson");
        let r = sample_report();
        {
            let mut w = MetricsWriter::append(&path).unwrap();
            w.report(&r).unwrap();
        }
        {
            let mut w = MetricsWriter::append(&path).unwrap();
            w.report(&r).unwrap();
        }
        let reports = read_reports(&read_records(&path).unwrap()).unwrap();
        assert_eq!(reports, vec![r.clone(), r]);
    }

    #[test]
    fn wall_clock_is_stripped() {
        let lines = report_records(&sample_report());
        let stripped = without_wall_clock(&lines.join("\n")).unwrap();
        let last = stripped.last().unwrap();
        assert!(!last.contains(WALL_CLOCK_FIELD));
        assert!(parse_line(last).is_ok());
        assert_eq!(stripped[0], lines[0]);
    }
}
