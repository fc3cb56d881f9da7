use crate::error::{Error, Result};
use crate::linalg::{kaiming_uniform, Matrix, Rng};

use super::gate::GateNetwork;
use super::lowrank::{LowRankFactors, Route};
use super::{impl_adapter, AdapterSpec, Mixing, SchemeKind};

/// Single `(A, B)` pair shared by every task.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub(crate) spec: AdapterSpec,
    pub a: Matrix,
    pub b: Matrix,
}

impl LoraAdapter {
    /// `A` Kaiming-uniform with fan-in `d_in`, `B` zero.
    pub fn init(spec: AdapterSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let a = kaiming_uniform(spec.rank, spec.d_in, spec.d_in, rng)?;
        let b = Matrix::zeros(spec.d_out, spec.rank);
        Self::from_parts(spec, a, b)
    }

    pub fn from_parts(spec: AdapterSpec, a: Matrix, b: Matrix) -> Result<Self> {
        let spec = AdapterSpec {
            kind: SchemeKind::Lora,
            ..spec
        };
        spec.validate()?;
        if a.shape() != (spec.rank, spec.d_in) || b.shape() != (spec.d_out, spec.rank) {
            return Err(Error::Shape {
                op: "LoraAdapter",
                left: a.shape(),
                right: b.shape(),
            });
        }
        Ok(Self { spec, a, b })
    }

    pub fn rank(&self) -> usize {
        self.spec.rank
    }

    pub fn scale(&self) -> f64 {
        self.spec.scale
    }

    fn names(&self) -> Vec<String> {
        vec!["A".into(), "B".into()]
    }

    fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.a, &self.b]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.a, &mut self.b]
    }
}

impl LowRankFactors for LoraAdapter {
    fn d_in(&self) -> usize {
        self.spec.d_in
    }
    fn down(&self, _: usize) -> &Matrix {
        &self.a
    }
    fn up(&self, _: usize) -> &Matrix {
        &self.b
    }
    fn num_down(&self) -> usize {
        1
    }
    fn num_up(&self) -> usize {
        1
    }
    fn gate(&self) -> Option<&GateNetwork> {
        None
    }
    fn scale(&self) -> f64 {
        self.spec.scale
    }
    fn mixing(&self) -> Mixing {
        Mixing::Soft
    }
    // Every task shares the one pair; the index is still range-checked.
    fn routes(&self, task: usize, _: Option<&[f64]>) -> Result<Vec<Route>> {
        self.spec.check_task(task)?;
        Ok(vec![Route::single(0, 0)])
    }
}

impl_adapter!(LoraAdapter);
