use crate::error::{Error, Result};
use crate::linalg::{kaiming_uniform, Matrix, Rng};

use super::gate::GateNetwork;
use super::lowrank::{LowRankFactors, Route, Term};
use super::{impl_adapter, AdapterSpec, Mixing, Routing, SchemeKind};

/// One independent `(A_i, B_i)` pair per task. With learned routing the pairs
/// are experts: `delta = scale · Σ_i g_i B_i A_i x`.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLoraAdapter {
    pub(crate) spec: AdapterSpec,
    pub a_tasks: Vec<Matrix>,
    pub b_tasks: Vec<Matrix>,
    pub router: Option<GateNetwork>,
}

impl MoeLoraAdapter {
    pub fn init(spec: AdapterSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let a_tasks = (0..spec.num_tasks)
            .map(|_| kaiming_uniform(spec.rank, spec.d_in, spec.d_in, rng))
            .collect::<Result<Vec<_>>>()?;
        let b_tasks = vec![Matrix::zeros(spec.d_out, spec.rank); spec.num_tasks];
        let router = match spec.routing {
            Routing::Oracle => None,
            Routing::Learned => Some(GateNetwork::init(spec.num_tasks, spec.d_in, rng)?),
        };
        let spec = AdapterSpec {
            kind: SchemeKind::MoeLora,
            ..spec
        };
        if a_tasks.iter().any(|a| a.shape() != (spec.rank, spec.d_in)) {
            return Err(Error::InvalidParameter("MoE-LoRA down-projection shape".into()));
        }
        Ok(Self {
            spec,
            a_tasks,
            b_tasks,
            router,
        })
    }

    fn names(&self) -> Vec<String> {
        let n = self.a_tasks.len();
        let mut names: Vec<String> = (0..n).map(|i| format!("A.{i}")).collect();
        names.extend((0..n).map(|i| format!("B.{i}")));
        if self.router.is_some() {
            names.extend(["gate.weight".to_string(), "gate.bias".to_string()]);
        }
        names
    }

    fn tensors(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = self.a_tasks.iter().chain(&self.b_tasks).collect();
        if let Some(g) = &self.router {
            out.extend([&g.weights, &g.bias]);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = self.a_tasks.iter_mut().chain(self.b_tasks.iter_mut()).collect();
        if let Some(g) = &mut self.router {
            out.extend([&mut g.weights, &mut g.bias]);
        }
        out
    }
}

impl LowRankFactors for MoeLoraAdapter {
    fn d_in(&self) -> usize {
        self.spec.d_in
    }
    fn down(&self, idx: usize) -> &Matrix {
        &self.a_tasks[idx]
    }
    fn up(&self, idx: usize) -> &Matrix {
        &self.b_tasks[idx]
    }
    fn num_down(&self) -> usize {
        self.a_tasks.len()
    }
    fn num_up(&self) -> usize {
        self.b_tasks.len()
    }
    fn gate(&self) -> Option<&GateNetwork> {
        self.router.as_ref()
    }
    fn scale(&self) -> f64 {
        self.spec.scale
    }
    fn mixing(&self) -> Mixing {
        self.spec.mixing
    }
    fn routes(&self, task: usize, gate_weights: Option<&[f64]>) -> Result<Vec<Route>> {
        self.spec.check_task(task)?;
        Ok(match gate_weights {
            None => vec![Route::single(task, task)],
            Some(w) => (0..self.a_tasks.len())
                .map(|k| Route {
                    down: k,
                    terms: vec![Term {
                        up: k,
                        weight: w[k],
                        gate_slot: Some(k),
                    }],
                })
                .collect(),
        })
    }
}

impl_adapter!(MoeLoraAdapter);
