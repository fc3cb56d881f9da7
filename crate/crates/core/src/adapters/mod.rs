//! Low-rank adapter schemes.
//!
//! Every scheme implements [`Adapter`] and is registered by name in
//! [`SchemeRegistry`]:
//!
//! | name           | trainable factors                                   |
//! |----------------|-----------------------------------------------------|
//! | `lora`         | one `A`, one `B`                                    |
//! | `moe-lora`     | one `(A_i, B_i)` pair per task                      |
//! | `asymlora`     | shared `A`, one `B_i` per task                      |
//! | `moe-asymlora` | shared `A`, `N × J` grid `B_i^j`, softmax gate      |
//!
//! All `B` matrices start at zero, so a fresh adapter leaves the host output
//! unchanged.

mod asym;
pub mod gate;
mod lora;
pub(crate) mod lowrank;
mod moe_asym;
mod moe_lora;
mod registry;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub use asym::AsymAdapter;
pub use gate::{entropy, gate_weights, softmax, GateCache, GateNetwork};
pub use lora::LoraAdapter;
pub use lowrank::{AdapterCache, Route, Term};
pub use moe_asym::MoeAsymAdapter;
pub use moe_lora::MoeLoraAdapter;
pub use registry::{SchemeFactory, SchemeRegistry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SchemeKind {
    #[serde(rename = "lora")]
    Lora,
    #[serde(rename = "moe-lora")]
    MoeLora,
    #[serde(rename = "asymlora")]
    AsymLora,
    #[serde(rename = "moe-asymlora")]
    MoeAsymLora,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 4] = [
        SchemeKind::Lora,
        SchemeKind::MoeLora,
        SchemeKind::AsymLora,
        SchemeKind::MoeAsymLora,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Lora => "lora",
            SchemeKind::MoeLora => "moe-lora",
            SchemeKind::AsymLora => "asymlora",
            SchemeKind::MoeAsymLora => "moe-asymlora",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            SchemeKind::Lora => "LoRA",
            SchemeKind::MoeLora => "MoE-LoRA",
            SchemeKind::AsymLora => "AsymLoRA",
            SchemeKind::MoeAsymLora => "MoE-AsymLoRA",
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownName {
                kind: "scheme",
                name: s.to_string(),
                known: SchemeKind::ALL.map(|k| k.name()).join(", "),
            })
    }
}

/// How a batch picks its task-specific factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Routing {
    /// The task index travels with the batch.
    #[default]
    Oracle,
    /// A gate over the per-task factors picks them from the input; the task
    /// index is ignored. Applies to `moe-lora` and `asymlora`.
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mixing {
    #[default]
    Soft,
    Top1,
}

/// Shape and hyperparameters of one adapter site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub kind: SchemeKind,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub num_tasks: usize,
    pub num_experts: usize,
    pub scale: f64,
    pub routing: Routing,
    pub mixing: Mixing,
}

impl AdapterSpec {
    pub fn new(kind: SchemeKind, d_in: usize, d_out: usize, rank: usize) -> Self {
        Self {
            kind,
            d_in,
            d_out,
            rank,
            num_tasks: 1,
            num_experts: 1,
            scale: 1.0,
            routing: Routing::Oracle,
            mixing: Mixing::Soft,
        }
    }

    pub fn with_tasks(mut self, n: usize) -> Self {
        self.num_tasks = n;
        self
    }

    pub fn with_experts(mut self, j: usize) -> Self {
        self.num_experts = j;
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_routing(mut self, routing: Routing) -> Self {
        self.routing = routing;
        self
    }

    pub fn with_mixing(mut self, mixing: Mixing) -> Self {
        self.mixing = mixing;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out == 0 {
            return Err(Error::InvalidParameter("adapter dims must be positive".into()));
        }
        if self.rank == 0 || self.rank > self.d_in.min(self.d_out) {
            return Err(Error::InvalidParameter(format!(
                "rank {} must be in 1..={}",
                self.rank,
                self.d_in.min(self.d_out)
            )));
        }
        if self.num_tasks == 0 {
            return Err(Error::InvalidParameter("num_tasks must be >= 1".into()));
        }
        if self.num_experts == 0 {
            return Err(Error::InvalidParameter("num_experts must be >= 1".into()));
        }
        if !self.scale.is_finite() {
            return Err(Error::InvalidParameter("scale must be finite".into()));
        }
        Ok(())
    }

    pub(crate) fn check_task(&self, task: usize) -> Result<()> {
        if task >= self.num_tasks {
            return Err(Error::TaskIndex {
                index: task,
                num_tasks: self.num_tasks,
            });
        }
        Ok(())
    }
}

/// One adapter attached to an affine layer. Implementations compute only the
/// low-rank contribution; the host adds it to `W·x + bias`.
pub trait Adapter: Send + Sync + fmt::Debug {
    fn spec(&self) -> &AdapterSpec;

    fn kind(&self) -> SchemeKind {
        self.spec().kind
    }

    /// `scale · Σ B_eff · (A · x)` for the routes this task takes.
    fn forward(&self, task: usize, x: &Matrix) -> Result<(Matrix, AdapterCache)>;

    /// Accumulates `dL/dθ` into `grads` (laid out like [`Adapter::params`])
    /// and returns `dL/dx` through the adapter path.
    fn backward(&self, cache: &AdapterCache, x: &Matrix, grad_out: &Matrix, grads: &mut [Matrix]) -> Result<Matrix>;

    fn zero_grads(&self) -> Vec<Matrix>;

    fn param_names(&self) -> Vec<String>;

    fn params(&self) -> Vec<&Matrix>;

    fn params_mut(&mut self) -> Vec<&mut Matrix>;

    /// Unscaled dense update `Σ B_eff · A` for the routes taken on `x`.
    /// With a gate the result depends on `x` through the pooled features.
    fn dense_update(&self, task: usize, x: &Matrix) -> Result<Matrix>;

    fn clone_box(&self) -> Box<dyn Adapter>;

    fn num_trainable(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

impl Clone for Box<dyn Adapter> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

macro_rules! impl_adapter {
    ($ty:ty) => {
        impl $crate::adapters::Adapter for $ty {
            fn spec(&self) -> &$crate::adapters::AdapterSpec {
                &self.spec
            }

            fn forward(
                &self,
                task: usize,
                x: &$crate::linalg::Matrix,
            ) -> $crate::error::Result<($crate::linalg::Matrix, $crate::adapters::AdapterCache)> {
                $crate::adapters::lowrank::forward(self, task, x)
            }

            fn backward(
                &self,
                cache: &$crate::adapters::AdapterCache,
                x: &$crate::linalg::Matrix,
                grad_out: &$crate::linalg::Matrix,
                grads: &mut [$crate::linalg::Matrix],
            ) -> $crate::error::Result<$crate::linalg::Matrix> {
                $crate::adapters::lowrank::backward(self, cache, x, grad_out, grads)
            }

            fn zero_grads(&self) -> Vec<$crate::linalg::Matrix> {
                $crate::adapters::lowrank::zero_grads(self)
            }

            fn param_names(&self) -> Vec<String> {
                self.names()
            }

            fn params(&self) -> Vec<&$crate::linalg::Matrix> {
                self.tensors()
            }

            fn params_mut(&mut self) -> Vec<&mut $crate::linalg::Matrix> {
                self.tensors_mut()
            }

            fn dense_update(
                &self,
                task: usize,
                x: &$crate::linalg::Matrix,
            ) -> $crate::error::Result<$crate::linalg::Matrix> {
                $crate::adapters::lowrank::dense_update(self, task, x)
            }

            fn clone_box(&self) -> Box<dyn $crate::adapters::Adapter> {
                Box::new(self.clone())
            }
        }
    };
}
pub(crate) use impl_adapter;

/// Trainable entries per adapter site, split by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamCount {
    /// Entries in down-projections (`A`).
    pub down: usize,
    /// Entries in up-projections (`B`).
    pub up: usize,
    pub gate: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.down + self.up + self.gate
    }
}

/// Trainable parameters of one adapter site under oracle routing.
///
/// LoRA `r(d_i+d_o)`, MoE-LoRA `N·r(d_i+d_o)`, AsymLoRA `r·d_i + N·d_o·r`,
/// MoE-AsymLoRA `r·d_i + N·J·d_o·r + J(d_i+1)`.
pub fn param_count(kind: SchemeKind, d_in: usize, d_out: usize, rank: usize, num_tasks: usize, num_experts: usize) -> ParamCount {
    let a = rank * d_in;
    let b = d_out * rank;
    match kind {
        SchemeKind::Lora => ParamCount { down: a, up: b, gate: 0 },
        SchemeKind::MoeLora => ParamCount {
            down: num_tasks * a,
            up: num_tasks * b,
            gate: 0,
        },
        SchemeKind::AsymLora => ParamCount {
            down: a,
            up: num_tasks * b,
            gate: 0,
        },
        SchemeKind::MoeAsymLora => ParamCount {
            down: a,
            up: num_tasks * num_experts * b,
            gate: num_experts * (d_in + 1),
        },
    }
}

/// `W + scale · B_eff · A`.
pub fn merge_adapter(w: &Matrix, a: &Matrix, b_eff: &Matrix, scale: f64) -> Result<Matrix> {
    let delta = b_eff.matmul(a)?;
    if delta.shape() != w.shape() {
        return Err(Error::Shape {
            op: "merge_adapter",
            left: w.shape(),
            right: delta.shape(),
        });
    }
    let mut out = w.clone();
    out.axpy(scale, &delta)?;
    Ok(out)
}

/// Folds any adapter's update for `(task, x)` into a dense weight.
pub fn merge_into(w: &Matrix, adapter: &dyn Adapter, task: usize, x: &Matrix) -> Result<Matrix> {
    let update = adapter.dense_update(task, x)?;
    let mut out = w.clone();
    if update.shape() != w.shape() {
        return Err(Error::Shape {
            op: "merge_into",
            left: w.shape(),
            right: update.shape(),
        });
    }
    out.axpy(adapter.spec().scale, &update)?;
    Ok(out)
}

fn base_plus(w: &Matrix, x: &Matrix, delta: &Matrix) -> Result<Matrix> {
    w.matmul(x)?.add(delta)
}

/// `W·x + scale·B·(A·x)`; the rank-r path is two skinny products.
pub fn lora_forward(w: &Matrix, adapter: &LoraAdapter, x: &Matrix) -> Result<Matrix> {
    let (delta, _) = adapter.forward(0, x)?;
    base_plus(w, x, &delta)
}

/// `W·x + scale·B_task·(A·x)` under oracle routing.
pub fn asym_forward(w: &Matrix, adapter: &AsymAdapter, task: usize, x: &Matrix) -> Result<Matrix> {
    let (delta, _) = adapter.forward(task, x)?;
    base_plus(w, x, &delta)
}

/// `W·x + scale·(Σ_j w_j B_task^j)·(A·x)`, returning the gate weights used.
pub fn moe_asym_forward(w: &Matrix, adapter: &MoeAsymAdapter, task: usize, x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let (delta, cache) = adapter.forward(task, x)?;
    let weights = cache.gate_weights().map(<[f64]>::to_vec).unwrap_or_default();
    Ok((base_plus(w, x, &delta)?, weights))
}
