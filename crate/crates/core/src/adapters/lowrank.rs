//! Forward and reverse pass shared by every scheme.
//!
//! A scheme is described by its down-projections `A_k`, its up-projections
//! `B_m`, an optional gate, and a routing rule. For a given task the rule
//! yields routes; each route pairs one `A` with a weighted set of `B`s:
//!
//! ```text
//! delta = scale · Σ_routes (Σ_terms w · B) · (A · x)
//! ```
//!
//! Gradient buffers are laid out as `[A_0.., B_0.., gate.weight, gate.bias]`.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::gate::{GateCache, GateNetwork};
use super::Mixing;

#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub up: usize,
    pub weight: f64,
    /// Index into the gate output this weight came from, if any.
    pub gate_slot: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub down: usize,
    pub terms: Vec<Term>,
}

impl Route {
    pub fn single(down: usize, up: usize) -> Self {
        Route {
            down,
            terms: vec![Term {
                up,
                weight: 1.0,
                gate_slot: None,
            }],
        }
    }

    pub fn gated(down: usize, ups: impl IntoIterator<Item = usize>, weights: &[f64]) -> Self {
        Route {
            down,
            terms: ups
                .into_iter()
                .enumerate()
                .map(|(slot, up)| Term {
                    up,
                    weight: weights[slot],
                    gate_slot: Some(slot),
                })
                .collect(),
        }
    }
}

/// Everything the reverse pass needs from one adapter forward.
#[derive(Debug, Clone)]
pub struct AdapterCache {
    pub task: usize,
    pub routes: Vec<Route>,
    /// `A · x` per route.
    pub projected: Vec<Matrix>,
    /// Mixed up-projection per route.
    pub mixed: Vec<Matrix>,
    pub gate: Option<GateCache>,
}

impl AdapterCache {
    pub fn gate_weights(&self) -> Option<&[f64]> {
        self.gate.as_ref().map(|g| g.applied.as_slice())
    }
}

pub(crate) trait LowRankFactors {
    fn d_in(&self) -> usize;
    fn down(&self, idx: usize) -> &Matrix;
    fn up(&self, idx: usize) -> &Matrix;
    fn num_down(&self) -> usize;
    fn num_up(&self) -> usize;
    fn gate(&self) -> Option<&GateNetwork>;
    fn scale(&self) -> f64;
    fn mixing(&self) -> Mixing;
    fn routes(&self, task: usize, gate_weights: Option<&[f64]>) -> Result<Vec<Route>>;
}

pub(crate) fn mix(factors: &impl LowRankFactors, terms: &[Term]) -> Result<Matrix> {
    let (first, rest) = terms
        .split_first()
        .ok_or_else(|| Error::InvalidParameter("route with no terms".into()))?;
    let mut out = factors.up(first.up).scale(first.weight);
    for t in rest {
        out.axpy(t.weight, factors.up(t.up))?;
    }
    Ok(out)
}

pub(crate) fn forward(
    factors: &impl LowRankFactors,
    task: usize,
    x: &Matrix,
) -> Result<(Matrix, AdapterCache)> {
    if x.rows() != factors.d_in() {
        return Err(Error::Shape {
            op: "adapter forward",
            left: factors.down(0).shape(),
            right: x.shape(),
        });
    }
    let gate = factors
        .gate()
        .map(|g| g.forward(x, factors.mixing()))
        .transpose()?;
    let routes = factors.routes(task, gate.as_ref().map(|g| g.applied.as_slice()))?;

    let mut projected = Vec::with_capacity(routes.len());
    let mut mixed = Vec::with_capacity(routes.len());
    let mut sum: Option<Matrix> = None;
    for route in &routes {
        let u = factors.down(route.down).matmul(x)?;
        let b_eff = mix(factors, &route.terms)?;
        let v = b_eff.matmul(&u)?;
        match sum.as_mut() {
            None => sum = Some(v),
            Some(s) => s.add_assign(&v)?,
        }
        projected.push(u);
        mixed.push(b_eff);
    }
    let delta = sum
        .ok_or_else(|| Error::InvalidParameter("adapter produced no routes".into()))?
        .scale(factors.scale());
    Ok((
        delta,
        AdapterCache {
            task,
            routes,
            projected,
            mixed,
            gate,
        },
    ))
}

pub(crate) fn zero_grads(factors: &impl LowRankFactors) -> Vec<Matrix> {
    let mut grads: Vec<Matrix> = (0..factors.num_down())
        .map(|k| Matrix::zeros(factors.down(k).rows(), factors.down(k).cols()))
        .chain((0..factors.num_up()).map(|m| Matrix::zeros(factors.up(m).rows(), factors.up(m).cols())))
        .collect();
    if let Some(g) = factors.gate() {
        grads.push(Matrix::zeros(g.weights.rows(), g.weights.cols()));
        grads.push(Matrix::zeros(g.bias.rows(), 1));
    }
    grads
}

/// Accumulates parameter gradients into `grads` and returns `dL/dx`.
pub(crate) fn backward(
    factors: &impl LowRankFactors,
    cache: &AdapterCache,
    x: &Matrix,
    grad_out: &Matrix,
    grads: &mut [Matrix],
) -> Result<Matrix> {
    let n_down = factors.num_down();
    let n_up = factors.num_up();
    let expected = n_down + n_up + if factors.gate().is_some() { 2 } else { 0 };
    if grads.len() != expected {
        return Err(Error::InvalidParameter(format!(
            "gradient buffer has {} slots, adapter has {expected} parameters",
            grads.len()
        )));
    }
    if cache.projected.first().map(|u| u.cols()) != Some(x.cols()) {
        return Err(Error::StaleCache("adapter cache batch size differs from input".into()));
    }

    let gs = grad_out.scale(factors.scale());
    let mut d_applied = vec![0.0; factors.gate().map_or(0, |g| g.num_experts())];
    let mut dx = Matrix::zeros(x.rows(), x.cols());

    for ((route, u), b_eff) in cache.routes.iter().zip(&cache.projected).zip(&cache.mixed) {
        let d_mixed = gs.matmul_t(u)?;
        let du = b_eff.t_matmul(&gs)?;
        grads[route.down].add_assign(&du.matmul_t(x)?)?;
        dx.add_assign(&factors.down(route.down).t_matmul(&du)?)?;
        for term in &route.terms {
            grads[n_down + term.up].axpy(term.weight, &d_mixed)?;
            if let Some(slot) = term.gate_slot {
                d_applied[slot] += d_mixed.dot(factors.up(term.up))?;
            }
        }
    }

    if let (Some(gate), Some(gc)) = (factors.gate(), cache.gate.as_ref()) {
        let gg = gate.backward(gc, &d_applied, x.cols())?;
        grads[n_down + n_up].add_assign(&gg.d_weights)?;
        grads[n_down + n_up + 1].add_assign(&gg.d_bias)?;
        dx.add_assign(&gg.d_input)?;
    }
    Ok(dx)
}

/// Dense `Σ_routes mixed · A` for the routes taken on `x`.
pub(crate) fn dense_update(factors: &impl LowRankFactors, task: usize, x: &Matrix) -> Result<Matrix> {
    let (_, cache) = forward(factors, task, x)?;
    let mut out: Option<Matrix> = None;
    for (route, b_eff) in cache.routes.iter().zip(&cache.mixed) {
        let d = b_eff.matmul(factors.down(route.down))?;
        match out.as_mut() {
            None => out = Some(d),
            Some(o) => o.add_assign(&d)?,
        }
    }
    out.ok_or_else(|| Error::InvalidParameter("adapter produced no routes".into()))
}
