//! First-order optimizers over the adapter parameter list.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: String,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: "adam".into(),
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Snapshot of everything an optimizer carries between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: String,
    pub learning_rate: f64,
    pub step: u64,
    pub first_moments: Vec<Matrix>,
    pub second_moments: Vec<Matrix>,
}

pub trait Optimizer: Send + fmt::Debug {
    fn name(&self) -> &'static str;

    fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()>;

    fn state(&self) -> OptimizerState;

    fn load_state(&mut self, state: OptimizerState) -> Result<()>;
}

fn check_shapes(params: &[&mut Matrix], grads: &[Matrix]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::InvalidParameter(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "optimizer step",
                left: p.shape(),
                right: g.shape(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Sgd {
    learning_rate: f64,
    step: u64,
}

impl Sgd {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, step: 0 }
    }
}

impl Optimizer for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        check_shapes(params, grads)?;
        for (p, g) in params.iter_mut().zip(grads) {
            p.axpy(-self.learning_rate, g)?;
        }
        self.step += 1;
        Ok(())
    }

    fn state(&self) -> OptimizerState {
        OptimizerState {
            kind: "sgd".into(),
            learning_rate: self.learning_rate,
            step: self.step,
            first_moments: Vec::new(),
            second_moments: Vec::new(),
        }
    }

    fn load_state(&mut self, state: OptimizerState) -> Result<()> {
        if state.kind != "sgd" {
            return Err(Error::InvalidParameter(format!("cannot load {} state into sgd", state.kind)));
        }
        self.learning_rate = state.learning_rate;
        self.step = state.step;
        Ok(())
    }
}

/// Adam with bias correction:
/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
/// `θ ← θ − lr · m̂ / (√v̂ + ε)` with `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)`.
#[derive(Debug, Clone)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        check_shapes(params, grads)?;
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != grads.len() || self.m.iter().zip(grads).any(|(m, g)| m.shape() != g.shape()) {
            return Err(Error::InvalidParameter("Adam moments do not match parameter shapes".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let p = p.as_mut_slice();
            let m = m.as_mut_slice();
            let v = v.as_mut_slice();
            for (k, &gk) in g.as_slice().iter().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }

    fn state(&self) -> OptimizerState {
        OptimizerState {
            kind: "adam".into(),
            learning_rate: self.learning_rate,
            step: self.step,
            first_moments: self.m.clone(),
            second_moments: self.v.clone(),
        }
    }

    fn load_state(&mut self, state: OptimizerState) -> Result<()> {
        if state.kind != "adam" || state.first_moments.len() != state.second_moments.len() {
            return Err(Error::InvalidParameter(format!("cannot load {} state into adam", state.kind)));
        }
        self.learning_rate = state.learning_rate;
        self.step = state.step;
        self.m = state.first_moments;
        self.v = state.second_moments;
        Ok(())
    }
}

type OptimizerCtor = fn(&OptimizerConfig) -> Box<dyn Optimizer>;

pub struct OptimizerRegistry {
    ctors: BTreeMap<&'static str, OptimizerCtor>,
}

impl Default for OptimizerRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl OptimizerRegistry {
    pub fn builtin() -> Self {
        let mut ctors: BTreeMap<&'static str, OptimizerCtor> = BTreeMap::new();
        ctors.insert("sgd", |c| Box::new(Sgd::new(c.learning_rate)));
        ctors.insert("adam", |c| Box::new(Adam::new(c.learning_rate, c.beta1, c.beta2, c.epsilon)));
        Self { ctors }
    }

    pub fn register(&mut self, name: &'static str, ctor: OptimizerCtor) {
        self.ctors.insert(name, ctor);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.ctors.keys().copied().collect()
    }

    pub fn build(&self, cfg: &OptimizerConfig) -> Result<Box<dyn Optimizer>> {
        let ctor = self.ctors.get(cfg.kind.as_str()).ok_or_else(|| Error::UnknownName {
            kind: "optimizer",
            name: cfg.kind.clone(),
            known: self.names().join(", "),
        })?;
        Ok(ctor(cfg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut p = Matrix::column(&[1.0, 2.0]).unwrap();
        let g = Matrix::column(&[0.5, -1.0]).unwrap();
        let mut opt = Sgd::new(0.1);
        opt.step(&mut [&mut p], &[g]).unwrap();
        assert_eq!(p.as_slice(), &[0.95, 2.1]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // bias-corrected first step is lr · g/|g| up to ε
        let mut p = Matrix::column(&[0.0, 0.0]).unwrap();
        let g = Matrix::column(&[3.0, -0.2]).unwrap();
        let mut opt = Adam::new(0.01, 0.9, 0.999, 1e-8);
        opt.step(&mut [&mut p], &[g]).unwrap();
        assert!((p.get(0, 0) + 0.01).abs() < 1e-9);
        assert!((p.get(1, 0) - 0.01).abs() < 1e-9);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut p = Matrix::column(&[0.3, -0.7]).unwrap();
        let before = p.clone();
        let g = Matrix::column(&[1.0, 2.0]).unwrap();
        for name in ["sgd", "adam"] {
            let cfg = OptimizerConfig {
                kind: name.into(),
                learning_rate: 0.0,
                ..Default::default()
            };
            let mut opt = OptimizerRegistry::builtin().build(&cfg).unwrap();
            for _ in 0..5 {
                opt.step(&mut [&mut p], std::slice::from_ref(&g)).unwrap();
            }
            assert_eq!(p, before);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = Matrix::column(&[5.0, -3.0]).unwrap();
        let mut opt = Adam::new(0.05, 0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            let g = p.scale(2.0);
            opt.step(&mut [&mut p], &[g]).unwrap();
        }
        assert!(p.max_abs() < 1e-3);
    }

    #[test]
    fn state_round_trip_continues_identically() {
        let g = Matrix::column(&[0.4, -0.1]).unwrap();
        let mut a = Adam::new(0.1, 0.9, 0.999, 1e-8);
        let mut pa = Matrix::column(&[1.0, 1.0]).unwrap();
        for _ in 0..3 {
            a.step(&mut [&mut pa], std::slice::from_ref(&g)).unwrap();
        }
        let mut b = Adam::new(0.0, 0.0, 0.0, 0.0);
        let mut pb = pa.clone();
        // restoring state restores lr and moments; betas come from config
        b.beta1 = 0.9;
        b.beta2 = 0.999;
        b.epsilon = 1e-8;
        b.load_state(a.state()).unwrap();
        a.step(&mut [&mut pa], std::slice::from_ref(&g)).unwrap();
        b.step(&mut [&mut pb], std::slice::from_ref(&g)).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn mismatched_shapes_error() {
        let mut p = Matrix::zeros(2, 2);
        let mut opt = Adam::new(0.1, 0.9, 0.999, 1e-8);
        assert!(opt.step(&mut [&mut p], &[Matrix::zeros(2, 1)]).is_err());
        assert!(opt.step(&mut [&mut p], &[]).is_err());
        let cfg = OptimizerConfig {
            kind: "lbfgs".into(),
            ..Default::default()
        };
        assert!(OptimizerRegistry::builtin().build(&cfg).is_err());
    }
}
