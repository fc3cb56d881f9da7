//! Synthetic multi-task regression with tunable cross-task commonality and
//! conflict.
//!
//! Each task `i` has a rank-`r*` teacher update `ΔW_i = B_i · A_i` acting on
//! the host input; targets are `Y = base(X) + ΔW_i · X + σ·η` with
//! `X, η ~ N(0, 1)` entrywise and `base` the frozen host.
//!
//! Teacher construction, for commonality `κ` and conflict `γ`:
//!
//! 1. `A_sh` has orthonormal rows (then unit Frobenius norm). The task
//!    factors `A_i` are Gram–Schmidt orthonormalized against `A_sh` and each
//!    other in the vectorized space. `B_sh` and `B_i` likewise (without the
//!    row constraint).
//! 2. Commonality: `Ã_i = unit(κ·A_sh + (1−κ)·A_i)`, `B̃_i = unit(κ·B_sh + (1−κ)·B_i)`.
//! 3. Conflict (only for `N ≥ 2`): with orthonormal `P_1..P_N`, the simplex
//!    directions `M_i = unit(Σ_k (δ_ik − 1/N)·P_k)` have pairwise cosine
//!    `−1/(N−1)`. Then `A*_i = unit((1−γ)·Ã_i + γ·A_sh)` and
//!    `B*_i = unit((1−γ)·B̃_i + γ·M_i)`. Because `A_sh` has orthonormal
//!    rows, at `γ = 1` the updates inherit the simplex cosine exactly.
//! 4. `B*_i` is rescaled so `‖ΔW_i‖_F = teacher_norm`.
//!
//! "Conflict" here is this geometric construction (anti-aligned low-rank
//! updates), not label noise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::host::HostModel;
use crate::linalg::{Matrix, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_index: usize,
    /// `r* × d_in`
    pub teacher_a: Matrix,
    /// `d_out × r*`
    pub teacher_b: Matrix,
    pub noise_std: f64,
    pub num_samples: usize,
}

impl TaskSpec {
    pub fn delta(&self) -> Matrix {
        self.teacher_b
            .matmul(&self.teacher_a)
            .expect("teacher factors conform by construction")
    }
}

/// One mini-batch of a task, one example per column.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub task_index: usize,
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl TaskBatch {
    pub fn new(task_index: usize, inputs: Matrix, targets: Matrix) -> Result<Self> {
        if inputs.cols() != targets.cols() {
            return Err(Error::Shape {
                op: "TaskBatch",
                left: inputs.shape(),
                right: targets.shape(),
            });
        }
        Ok(Self {
            task_index,
            inputs,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.cols() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskGenConfig {
    pub num_tasks: usize,
    pub commonality: f64,
    pub conflict: f64,
    pub d_in: usize,
    pub d_out: usize,
    pub teacher_rank: usize,
    pub noise_std: f64,
    pub num_samples: usize,
    pub teacher_norm: f64,
}

impl TaskGenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.num_tasks == 0 {
            return bad("num_tasks must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.commonality) {
            return bad(format!("commonality {} outside [0, 1]", self.commonality));
        }
        if !(0.0..=1.0).contains(&self.conflict) {
            return bad(format!("conflict {} outside [0, 1]", self.conflict));
        }
        if self.teacher_rank == 0 || self.teacher_rank > self.d_in.min(self.d_out) {
            return bad(format!(
                "teacher_rank {} must be in 1..={}",
                self.teacher_rank,
                self.d_in.min(self.d_out)
            ));
        }
        if self.num_tasks + 1 > self.teacher_rank * self.d_in.min(self.d_out) {
            return bad("too many tasks for the teacher factor space".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be >= 0", self.noise_std));
        }
        if !(self.teacher_norm > 0.0 && self.teacher_norm.is_finite()) {
            return bad(format!("teacher_norm {} must be > 0", self.teacher_norm));
        }
        Ok(())
    }
}

fn unit(m: Matrix) -> Matrix {
    let n = m.frobenius_norm();
    m.scale(1.0 / n)
}

/// Gram–Schmidt in the vectorized space; redraws on (unlikely) degeneracy.
fn orthonormal_set(count: usize, rows: usize, cols: usize, against: &[&Matrix], rng: &mut Rng) -> Vec<Matrix> {
    let mut basis: Vec<Matrix> = against.iter().map(|m| (*m).clone()).collect();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = rng.normal_matrix(rows, cols, 1.0);
        for b in &basis {
            let proj = v.dot(b).expect("same shape");
            v.axpy(-proj, b).expect("same shape");
        }
        if v.frobenius_norm() < 1e-8 {
            continue;
        }
        let v = unit(v);
        basis.push(v.clone());
        out.push(v);
    }
    out
}

/// `r × d` with orthonormal rows, scaled to unit Frobenius norm.
fn orthonormal_rows(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let mut done: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while done.len() < rows {
        let mut v: Vec<f64> = (0..cols).map(|_| rng.normal()).collect();
        for b in &done {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-8 {
            continue;
        }
        done.push(v.into_iter().map(|x| x / n).collect());
    }
    let flat: Vec<f64> = done.concat();
    Matrix::from_vec(rows, cols, flat).expect("finite").scale(1.0 / (rows as f64).sqrt())
}

fn blend(wa: f64, a: &Matrix, wb: f64, b: &Matrix) -> Matrix {
    let mut out = a.scale(wa);
    out.axpy(wb, b).expect("same shape");
    unit(out)
}

pub fn generate_tasks(cfg: &TaskGenConfig, seed: u64) -> Result<Vec<TaskSpec>> {
    cfg.validate()?;
    let (n, r, d_in, d_out) = (cfg.num_tasks, cfg.teacher_rank, cfg.d_in, cfg.d_out);
    let (kappa, gamma) = (cfg.commonality, cfg.conflict);
    let mut rng = Rng::derive(seed, "teacher");

    let a_shared = orthonormal_rows(r, d_in, &mut rng);
    let a_tasks = orthonormal_set(n, r, d_in, &[&a_shared], &mut rng);
    let b_all = orthonormal_set(n + 1, d_out, r, &[], &mut rng);
    let (b_shared, b_tasks) = b_all.split_first().expect("n + 1 >= 2");
    let simplex = if n >= 2 {
        let p = orthonormal_set(n, d_out, r, &[], &mut rng);
        (0..n)
            .map(|i| {
                let mut m = Matrix::zeros(d_out, r);
                for (k, pk) in p.iter().enumerate() {
                    let c = if i == k { 1.0 } else { 0.0 } - 1.0 / n as f64;
                    m.axpy(c, pk).expect("same shape");
                }
                unit(m)
            })
            .collect()
    } else {
        Vec::new()
    };

    (0..n)
        .map(|i| {
            let mut a = blend(kappa, &a_shared, 1.0 - kappa, &a_tasks[i]);
            let mut b = blend(kappa, b_shared, 1.0 - kappa, &b_tasks[i]);
            if n >= 2 && gamma > 0.0 {
                a = blend(1.0 - gamma, &a, gamma, &a_shared);
                b = blend(1.0 - gamma, &b, gamma, &simplex[i]);
            }
            let norm = b.matmul(&a)?.frobenius_norm();
            let teacher_b = b.scale(cfg.teacher_norm / norm);
            Ok(TaskSpec {
                task_index: i,
                teacher_a: a,
                teacher_b,
                noise_std: cfg.noise_std,
                num_samples: cfg.num_samples,
            })
        })
        .collect()
}

/// Draws `X` (row-major, `d_in × batch`) then the noise (`d_out × batch`)
/// from `rng`; targets are `base(X) + ΔW·X + σ·noise`.
pub fn sample_batch(spec: &TaskSpec, base: &HostModel, batch_size: usize, rng: &mut Rng) -> Result<TaskBatch> {
    let d_in = spec.teacher_a.cols();
    let d_out = spec.teacher_b.rows();
    if base.d_in() != d_in || base.d_out() != d_out {
        return Err(Error::Shape {
            op: "sample_batch",
            left: (d_out, d_in),
            right: (base.d_out(), base.d_in()),
        });
    }
    let x = rng.normal_matrix(d_in, batch_size, 1.0);
    let noise = rng.normal_matrix(d_out, batch_size, 1.0);
    let mut y = base.base_forward(&x)?;
    let projected = spec.teacher_a.matmul(&x)?;
    y.add_assign(&spec.teacher_b.matmul(&projected)?)?;
    if spec.noise_std > 0.0 {
        y.axpy(spec.noise_std, &noise)?;
    }
    TaskBatch::new(spec.task_index, x, y)
}

/// Mean pairwise cosine between the vectorized teacher `A` factors.
pub fn mean_pairwise_a_cosine(tasks: &[TaskSpec]) -> f64 {
    mean_pairwise(tasks, |t| t.teacher_a.clone())
}

/// Mean pairwise cosine between the vectorized teacher updates `ΔW_i`.
pub fn mean_pairwise_delta_cosine(tasks: &[TaskSpec]) -> f64 {
    mean_pairwise(tasks, TaskSpec::delta)
}

fn mean_pairwise(tasks: &[TaskSpec], f: impl Fn(&TaskSpec) -> Matrix) -> f64 {
    let mats: Vec<Matrix> = tasks.iter().map(f).collect();
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..mats.len() {
        for j in i + 1..mats.len() {
            sum += mats[i].cosine(&mats[j]).expect("same shape");
            count += 1;
        }
    }
    if count == 0 {
        1.0
    } else {
        sum / count as f64
    }
}

const DATASET_MAGIC: &[u8; 4] = b"ASYD";
const DATASET_VERSION: u32 = 1;

/// Materialized samples for every task.
///
/// File layout, little-endian throughout:
///
/// ```text
/// magic "ASYD" | version u32 = 1 | d_in u64 | d_out u64 | N u64 | count_i u64 × N
/// then per task i: X_i (d_in × count_i) f64 row-major, Y_i (d_out × count_i) f64 row-major
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub d_in: usize,
    pub d_out: usize,
    pub tasks: Vec<TaskBatch>,
}

impl Dataset {
    /// `spec.num_samples` examples per task, each task from its own stream
    /// `derive(seed, "export.i")`.
    pub fn materialize(tasks: &[TaskSpec], base: &HostModel, seed: u64) -> Result<Self> {
        let batches = tasks
            .iter()
            .map(|t| {
                let mut rng = Rng::derive(seed, &format!("export.{}", t.task_index));
                sample_batch(t, base, t.num_samples, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            d_in: base.d_in(),
            d_out: base.d_out(),
            tasks: batches,
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        for v in [self.d_in, self.d_out, self.tasks.len()] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for t in &self.tasks {
            w.write_all(&(t.len() as u64).to_le_bytes())?;
        }
        for t in &self.tasks {
            for v in t.inputs.as_slice().iter().chain(t.targets.as_slice()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::Dataset(e.to_string()))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != DATASET_MAGIC {
            return Err(Error::Dataset("bad magic".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
        if version != DATASET_VERSION {
            return Err(Error::Dataset(format!("unsupported version {version}")));
        }
        let d_in = cur.u64()? as usize;
        let d_out = cur.u64()? as usize;
        let n = cur.u64()? as usize;
        let counts = (0..n).map(|_| cur.u64().map(|c| c as usize)).collect::<Result<Vec<_>>>()?;
        let tasks = counts
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let x = cur.matrix(d_in, c)?;
                let y = cur.matrix(d_out, c)?;
                TaskBatch::new(i, x, y)
            })
            .collect::<Result<Vec<_>>>()?;
        if cur.pos != bytes.len() {
            return Err(Error::Dataset("trailing bytes".into()));
        }
        Ok(Self { d_in, d_out, tasks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Dataset(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Dataset("matrix size overflow".into()))?;
        let raw = self.take(n)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Matrix::from_vec(rows, cols, data).map_err(|e| Error::Dataset(e.to_string()))
    }
}
