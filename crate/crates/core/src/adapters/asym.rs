use crate::error::{Error, Result};
use crate::linalg::{kaiming_uniform, Matrix, Rng};

use super::gate::GateNetwork;
use super::lowrank::{LowRankFactors, Route};
use super::{impl_adapter, AdapterSpec, Mixing, Routing, SchemeKind};

/// Shared down-projection `A` with one up-projection `B_i` per task.
///
/// Under learned routing the `B_i` act as experts: a gate over the `N` of
/// them builds `Σ_i g_i B_i` from the input, and the task index is ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct AsymAdapter {
    pub(crate) spec: AdapterSpec,
    pub a_shared: Matrix,
    pub b_tasks: Vec<Matrix>,
    pub router: Option<GateNetwork>,
}

impl AsymAdapter {
    pub fn init(spec: AdapterSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let a_shared = kaiming_uniform(spec.rank, spec.d_in, spec.d_in, rng)?;
        let b_tasks = vec![Matrix::zeros(spec.d_out, spec.rank); spec.num_tasks];
        let router = match spec.routing {
            Routing::Oracle => None,
            Routing::Learned => Some(GateNetwork::init(spec.num_tasks, spec.d_in, rng)?),
        };
        Self::from_parts(spec, a_shared, b_tasks, router)
    }

    pub fn from_parts(spec: AdapterSpec, a_shared: Matrix, b_tasks: Vec<Matrix>, router: Option<GateNetwork>) -> Result<Self> {
        let spec = AdapterSpec {
            kind: SchemeKind::AsymLora,
            num_tasks: b_tasks.len(),
            routing: if router.is_some() { Routing::Learned } else { Routing::Oracle },
            ..spec
        };
        spec.validate()?;
        if a_shared.shape() != (spec.rank, spec.d_in) {
            return Err(Error::Shape {
                op: "AsymAdapter A",
                left: a_shared.shape(),
                right: (spec.rank, spec.d_in),
            });
        }
        if let Some(b) = b_tasks.iter().find(|b| b.shape() != (spec.d_out, spec.rank)) {
            return Err(Error::Shape {
                op: "AsymAdapter B",
                left: b.shape(),
                right: (spec.d_out, spec.rank),
            });
        }
        if let Some(g) = &router {
            if g.num_experts() != spec.num_tasks || g.d_in() != spec.d_in {
                return Err(Error::Shape {
                    op: "AsymAdapter router",
                    left: g.weights.shape(),
                    right: (spec.num_tasks, spec.d_in),
                });
            }
        }
        Ok(Self {
            spec,
            a_shared,
            b_tasks,
            router,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.b_tasks.len()
    }

    fn names(&self) -> Vec<String> {
        let mut names = vec!["A".to_string()];
        names.extend((0..self.b_tasks.len()).map(|i| format!("B.{i}")));
        if self.router.is_some() {
            names.extend(["gate.weight".to_string(), "gate.bias".to_string()]);
        }
        names
    }

    fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.a_shared];
        out.extend(self.b_tasks.iter());
        if let Some(g) = &self.router {
            out.extend([&g.weights, &g.bias]);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.a_shared];
        out.extend(self.b_tasks.iter_mut());
        if let Some(g) = &mut self.router {
            out.extend([&mut g.weights, &mut g.bias]);
        }
        out
    }
}

impl LowRankFactors for AsymAdapter {
    fn d_in(&self) -> usize {
        self.spec.d_in
    }
    fn down(&self, _: usize) -> &Matrix {
        &self.a_shared
    }
    fn up(&self, idx: usize) -> &Matrix {
        &self.b_tasks[idx]
    }
    fn num_down(&self) -> usize {
        1
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
        Ok(vec![match gate_weights {
            None => Route::single(0, task),
            Some(w) => Route::gated(0, 0..self.b_tasks.len(), w),
        }])
    }
}

impl_adapter!(AsymAdapter);
