use crate::error::{Error, Result};
use crate::linalg::{kaiming_uniform, Matrix, Rng};

use super::gate::GateNetwork;
use super::lowrank::{LowRankFactors, Route};
use super::{impl_adapter, AdapterSpec, Mixing, SchemeKind};

/// Shared `A`, an `N × J` grid of up-projections `B_i^j`, and a gate over the
/// `J` experts. Task `i` uses `B_eff = Σ_j w_j B_i^j`.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeAsymAdapter {
    pub(crate) spec: AdapterSpec,
    pub a_shared: Matrix,
    /// `b_experts[i][j]` is expert `j` of task `i`.
    pub b_experts: Vec<Vec<Matrix>>,
    pub gate: GateNetwork,
}

impl MoeAsymAdapter {
    /// Draws `A` first and the gate second, so `A` matches the other
    /// schemes for the same stream.
    pub fn init(spec: AdapterSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let a_shared = kaiming_uniform(spec.rank, spec.d_in, spec.d_in, rng)?;
        let gate = GateNetwork::init(spec.num_experts, spec.d_in, rng)?;
        let b_experts = vec![vec![Matrix::zeros(spec.d_out, spec.rank); spec.num_experts]; spec.num_tasks];
        Self::from_parts(spec, a_shared, b_experts, gate)
    }

    pub fn from_parts(spec: AdapterSpec, a_shared: Matrix, b_experts: Vec<Vec<Matrix>>, gate: GateNetwork) -> Result<Self> {
        let num_experts = gate.num_experts();
        let spec = AdapterSpec {
            kind: SchemeKind::MoeAsymLora,
            num_tasks: b_experts.len(),
            num_experts,
            ..spec
        };
        spec.validate()?;
        if a_shared.shape() != (spec.rank, spec.d_in) || gate.d_in() != spec.d_in {
            return Err(Error::Shape {
                op: "MoeAsymAdapter",
                left: a_shared.shape(),
                right: gate.weights.shape(),
            });
        }
        for row in &b_experts {
            if row.len() != num_experts {
                return Err(Error::InvalidParameter(format!(
                    "expert grid is not rectangular: expected {num_experts} experts per task, got {}",
                    row.len()
                )));
            }
            if let Some(b) = row.iter().find(|b| b.shape() != (spec.d_out, spec.rank)) {
                return Err(Error::Shape {
                    op: "MoeAsymAdapter B",
                    left: b.shape(),
                    right: (spec.d_out, spec.rank),
                });
            }
        }
        Ok(Self {
            spec,
            a_shared,
            b_experts,
            gate,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.spec.num_experts
    }

    fn names(&self) -> Vec<String> {
        let mut names = vec!["A".to_string()];
        for (i, row) in self.b_experts.iter().enumerate() {
            names.extend((0..row.len()).map(|j| format!("B.{i}.{j}")));
        }
        names.extend(["gate.weight".to_string(), "gate.bias".to_string()]);
        names
    }

    fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.a_shared];
        out.extend(self.b_experts.iter().flatten());
        out.extend([&self.gate.weights, &self.gate.bias]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.a_shared];
        out.extend(self.b_experts.iter_mut().flatten());
        out.extend([&mut self.gate.weights, &mut self.gate.bias]);
        out
    }
}

impl LowRankFactors for MoeAsymAdapter {
    fn d_in(&self) -> usize {
        self.spec.d_in
    }
    fn down(&self, _: usize) -> &Matrix {
        &self.a_shared
    }
    fn up(&self, idx: usize) -> &Matrix {
        let j = self.spec.num_experts;
        &self.b_experts[idx / j][idx % j]
    }
    fn num_down(&self) -> usize {
        1
    }
    fn num_up(&self) -> usize {
        self.spec.num_tasks * self.spec.num_experts
    }
    fn gate(&self) -> Option<&GateNetwork> {
        Some(&self.gate)
    }
    fn scale(&self) -> f64 {
        self.spec.scale
    }
    fn mixing(&self) -> Mixing {
        self.spec.mixing
    }
    fn routes(&self, task: usize, gate_weights: Option<&[f64]>) -> Result<Vec<Route>> {
        self.spec.check_task(task)?;
        let w = gate_weights.ok_or_else(|| Error::InvalidParameter("MoE-AsymLoRA needs gate weights".into()))?;
        let j = self.spec.num_experts;
        Ok(vec![Route::gated(0, (0..j).map(|e| task * j + e), w)])
    }
}

impl_adapter!(MoeAsymAdapter);
