//! Binary training snapshots.
//!
//! ```text
//! magic "ASYM" | version u32 | tensor count u32
//! per tensor: name len u32 | name utf8 | rows u64 | cols u64 | rows·cols f64 row-major
//! ```
//!
//! Everything is little-endian and the file is nothing but the tensor table.
//! Names:
//!
//! | name | contents |
//! |---|---|
//! | `base.layer{l}.weight`, `base.layer{l}.bias` | frozen host |
//! | `layer{l}.A`, `layer{l}.B.{i}`, `layer{l}.gate.weight`, ... | adapter and gate parameters |
//! | `adam.m.{param}`, `adam.v.{param}` | optimizer moments |
//! | `meta.step` | 1×1, completed training steps |
//! | `meta.rng` | 1×2, data stream state as high and low 32-bit halves |
//! | `meta.recent_losses` | 1×k, training losses of the smoothing window |
//! | `meta.optimizer.{kind}` | 1×2, learning rate and optimizer step |
//! | `meta.scheme.{name}` | 1×1, marks the adapter scheme |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::TaskSpec;
use crate::error::{Error, Result};
use crate::host::HostModel;
use crate::linalg::{Matrix, Rng};
use crate::optim::{Optimizer, OptimizerState};
use crate::train::{scheme_label, Trainer};

pub const MAGIC: &[u8; 4] = b"ASYM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub scheme: String,
    pub step: u64,
    pub rng_state: u64,
    pub optimizer_kind: String,
    pub learning_rate: f64,
    pub optimizer_step: u64,
    pub recent_losses: Vec<f64>,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer) -> Self {
        let model = trainer.model();
        let mut tensors = Vec::new();
        for (l, layer) in model.layers().iter().enumerate() {
            tensors.push((format!("base.layer{l}.weight"), layer.weight.clone()));
            tensors.push((format!("base.layer{l}.bias"), layer.bias.clone()));
        }
        let params = model.parameters();
        let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        tensors.extend(params.into_iter().map(|(n, p)| (n, p.clone())));
        let opt = trainer.optimizer_state();
        for (n, m) in names.iter().zip(&opt.first_moments) {
            tensors.push((format!("adam.m.{n}"), m.clone()));
        }
        for (n, v) in names.iter().zip(&opt.second_moments) {
            tensors.push((format!("adam.v.{n}"), v.clone()));
        }
        Self {
            scheme: scheme_label(model),
            step: trainer.steps_done(),
            rng_state: trainer.data_rng().state(),
            optimizer_kind: opt.kind,
            learning_rate: opt.learning_rate,
            optimizer_step: opt.step,
            recent_losses: trainer.recent_losses(),
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    fn expect_tensor(&self, name: &str, shape: (usize, usize)) -> Result<&Matrix> {
        let m = self
            .tensor(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if m.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` is {:?}, model expects {shape:?}",
                m.shape()
            )));
        }
        Ok(m)
    }

    /// Loads the snapshot into a freshly built model of the same architecture
    /// and scheme, and returns a trainer positioned right after `step`.
    pub fn restore(
        &self,
        mut model: HostModel,
        tasks: Vec<TaskSpec>,
        mut optimizer: Box<dyn Optimizer>,
        batch_size: usize,
    ) -> Result<Trainer> {
        let scheme = scheme_label(&model);
        if scheme != self.scheme {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds `{}` adapters, model has `{scheme}`",
                self.scheme
            )));
        }
        if optimizer.name() != self.optimizer_kind {
            return Err(Error::Checkpoint(format!(
                "checkpoint optimizer is `{}`, configured `{}`",
                self.optimizer_kind,
                optimizer.name()
            )));
        }
        let base: Vec<(Matrix, Matrix)> = model
            .layers()
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                Ok((
                    self.expect_tensor(&format!("base.layer{l}.weight"), layer.weight.shape())?.clone(),
                    self.expect_tensor(&format!("base.layer{l}.bias"), layer.bias.shape())?.clone(),
                ))
            })
            .collect::<Result<_>>()?;
        for (layer, (w, b)) in model.layers_mut_unchecked().iter_mut().zip(base) {
            layer.weight = w;
            layer.bias = b;
        }

        let shapes: Vec<(String, (usize, usize))> =
            model.parameters().into_iter().map(|(n, p)| (n, p.shape())).collect();
        let values: Vec<Matrix> = shapes
            .iter()
            .map(|(n, s)| self.expect_tensor(n, *s).cloned())
            .collect::<Result<_>>()?;
        for (p, v) in model.parameters_mut().into_iter().zip(values) {
            *p = v;
        }

        let moments = |prefix: &str| -> Result<Vec<Matrix>> {
            if self.tensor(&format!("{prefix}.{}", shapes.first().map_or("", |s| s.0.as_str()))).is_none() {
                return Ok(Vec::new());
            }
            shapes
                .iter()
                .map(|(n, s)| self.expect_tensor(&format!("{prefix}.{n}"), *s).cloned())
                .collect()
        };
        optimizer.load_state(OptimizerState {
            kind: self.optimizer_kind.clone(),
            learning_rate: self.learning_rate,
            step: self.optimizer_step,
            first_moments: moments("adam.m")?,
            second_moments: moments("adam.v")?,
        })?;
        Ok(Trainer::resume(
            model,
            tasks,
            optimizer,
            batch_size,
            Rng::from_state(self.rng_state),
            self.step,
        )?
        .with_recent_losses(&self.recent_losses))
    }

    fn table(&self) -> Vec<(String, Matrix)> {
        let scalar = |v: f64| Matrix::from_vec(1, 1, vec![v]).expect("finite");
        let mut out = vec![
            ("meta.step".to_string(), scalar(self.step as f64)),
            (
                "meta.rng".to_string(),
                Matrix::from_vec(1, 2, vec![(self.rng_state >> 32) as f64, (self.rng_state & 0xFFFF_FFFF) as f64])
                    .expect("finite"),
            ),
            (
                format!("meta.optimizer.{}", self.optimizer_kind),
                Matrix::from_vec(1, 2, vec![self.learning_rate, self.optimizer_step as f64]).expect("finite"),
            ),
            (format!("meta.scheme.{}", self.scheme), scalar(1.0)),
            (
                "meta.recent_losses".to_string(),
                Matrix::from_vec(1, self.recent_losses.len(), self.recent_losses.clone()).expect("finite losses"),
            ),
        ];
        out.extend(self.tensors.iter().cloned());
        out
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let table = self.table();
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(table.len() as u32).to_le_bytes())?;
        for (name, m) in &table {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(m.rows() as u64).to_le_bytes())?;
            w.write_all(&(m.cols() as u64).to_le_bytes())?;
            for v in m.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("truncated tensor `{name}`")))?;
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let m = Matrix::from_vec(rows, cols, data)
                .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            table.push((name, m));
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Self::from_table(table)
    }

    fn from_table(table: Vec<(String, Matrix)>) -> Result<Self> {
        let mut step = None;
        let mut rng_state = None;
        let mut optimizer = None;
        let mut scheme = None;
        let mut recent_losses = None;
        let mut tensors = Vec::new();
        for (name, m) in table {
            let Some(key) = name.strip_prefix("meta.") else {
                tensors.push((name, m));
                continue;
            };
            let vals = m.as_slice();
            match key {
                "step" if vals.len() == 1 => step = Some(vals[0] as u64),
                "recent_losses" => recent_losses = Some(vals.to_vec()),
                "rng" if vals.len() == 2 => rng_state = Some(((vals[0] as u64) << 32) | vals[1] as u64),
                _ if key.starts_with("optimizer.") && vals.len() == 2 => {
                    optimizer = Some((key["optimizer.".len()..].to_string(), vals[0], vals[1] as u64))
                }
                _ if key.starts_with("scheme.") => scheme = Some(key["scheme.".len()..].to_string()),
                _ => return Err(Error::Checkpoint(format!("malformed metadata tensor `{name}`"))),
            }
        }
        let missing = |what: &str| Error::Checkpoint(format!("missing metadata `meta.{what}`"));
        let (optimizer_kind, learning_rate, optimizer_step) = optimizer.ok_or_else(|| missing("optimizer"))?;
        Ok(Self {
            scheme: scheme.ok_or_else(|| missing("scheme"))?,
            step: step.ok_or_else(|| missing("step"))?,
            rng_state: rng_state.ok_or_else(|| missing("rng"))?,
            optimizer_kind,
            learning_rate,
            optimizer_step,
            recent_losses: recent_losses.ok_or_else(|| missing("recent_losses"))?,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.remaining() < n {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not utf-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{SchemeKind, SchemeRegistry};
    use crate::config::ExperimentConfig;
    use crate::optim::OptimizerRegistry;
    use crate::train::{build_model, build_tasks};

    fn cfg() -> ExperimentConfig {
        ExperimentConfig::parse_with_overrides(
            "",
            &[
                "model.d_in=5".into(),
                "model.hidden=[6]".into(),
                "model.d_out=4".into(),
                "adapter.rank=2".into(),
                "data.batch_size=8".into(),
                "optimizer.learning_rate=0.01".into(),
            ],
        )
        .unwrap()
    }

    fn trainer(cfg: &ExperimentConfig, kind: SchemeKind, seed: u64) -> Trainer {
        let model = build_model(cfg, &SchemeRegistry::builtin(), kind, seed).unwrap();
        let tasks = build_tasks(cfg, seed).unwrap();
        let opt = OptimizerRegistry::builtin().build(&cfg.optimizer).unwrap();
        Trainer::new(model, tasks, opt, cfg.data.batch_size, seed).unwrap()
    }

    fn fresh(cfg: &ExperimentConfig, kind: SchemeKind, seed: u64, ckpt: &Checkpoint) -> Result<Trainer> {
        let model = build_model(cfg, &SchemeRegistry::builtin(), kind, seed)?;
        let tasks = build_tasks(cfg, seed)?;
        let opt = OptimizerRegistry::builtin().build(&cfg.optimizer)?;
        ckpt.restore(model, tasks, opt, cfg.data.batch_size)
    }

    #[test]
    fn bytes_round_trip() {
        let cfg = cfg();
        let mut t = trainer(&cfg, SchemeKind::MoeAsymLora, 3);
        t.run(7, |_| Ok(())).unwrap();
        let c = Checkpoint::capture(&t);
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"ASYM");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
        assert!(c.tensor("layer0.gate.weight").is_some());
        assert!(c.tensor("adam.v.layer1.B.2.1").is_some());
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let cfg = cfg();
        for kind in SchemeKind::ALL {
            let mut full = trainer(&cfg, kind, 5);
            let full_trace = full.run(20, |_| Ok(())).unwrap();

            let mut first = trainer(&cfg, kind, 5);
            let mut trace = first.run(10, |_| Ok(())).unwrap();
            let bytes = Checkpoint::capture(&first).to_bytes();
            let mut second = fresh(&cfg, kind, 5, &Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
            trace.extend(second.run(10, |_| Ok(())).unwrap());
            assert_eq!(trace, full_trace, "{kind}");
            assert_eq!(Checkpoint::capture(&second), Checkpoint::capture(&full));
        }
    }

    #[test]
    fn structured_errors() {
        let cfg = cfg();
        let t = trainer(&cfg, SchemeKind::AsymLora, 1);
        let c = Checkpoint::capture(&t);
        let bytes = c.to_bytes();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("magic"));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version 9"));

        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(err.to_string().contains("truncated"), "cut {cut}: {err}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());

        let err = fresh(&cfg, SchemeKind::Lora, 1, &c).unwrap_err();
        assert!(err.to_string().contains("asymlora"), "{err}");

        let wider = ExperimentConfig::parse_with_overrides(&cfg.to_toml(), &["model.hidden=[7]".into()]).unwrap();
        let err = fresh(&wider, SchemeKind::AsymLora, 1, &c).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("expects")), "{err}");
    }

    #[test]
    fn file_round_trip() {
        let cfg = cfg();
        let t = trainer(&cfg, SchemeKind::Lora, 2);
        let c = Checkpoint::capture(&t);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert!(matches!(
            Checkpoint::load(&dir.path().join("missing.bin")),
            Err(Error::Io { .. })
        ));
    }
}
