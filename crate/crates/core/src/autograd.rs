//! Reverse-mode gradients of the batch MSE with respect to adapter and gate
//! parameters, and a central finite-difference check against them.
//!
//! The operator set is fixed (affine, relu, low-rank path, gate mixture,
//! softmax, MSE), so the derivatives are written out by hand in
//! [`HostModel::backward`] and the adapter modules instead of going through a
//! tape.

use crate::data::TaskBatch;
use crate::error::{Error, Result};
use crate::host::{digest_matrix, ForwardCache, HostModel};
use crate::linalg::Matrix;

/// `(1 / (d_out · batch)) · ‖target − prediction‖²_F`
pub fn mse(prediction: &Matrix, target: &Matrix) -> Result<f64> {
    let diff = prediction.sub(target)?;
    Ok(diff.dot(&diff)? / diff.len() as f64)
}

pub fn mse_grad(prediction: &Matrix, target: &Matrix) -> Result<Matrix> {
    let diff = prediction.sub(target)?;
    let k = 2.0 / diff.len() as f64;
    Ok(diff.scale(k))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// `A` factors.
    Down,
    /// `B` factors.
    Up,
    Gate,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        let local = name.rsplit_once("layer").map_or(name, |(_, rest)| rest);
        let local = local.split_once('.').map_or(local, |(_, p)| p);
        if local.starts_with("gate") {
            ParamGroup::Gate
        } else if local.starts_with('A') {
            ParamGroup::Down
        } else {
            ParamGroup::Up
        }
    }
}

/// Gradients for every attached adapter, aligned with
/// [`HostModel::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    names: Vec<String>,
    grads: Vec<Matrix>,
}

impl GradientSet {
    fn from_layers(model: &HostModel, layers: Vec<Option<Vec<Matrix>>>) -> Self {
        let names = model.parameters().into_iter().map(|(n, _)| n).collect();
        let grads = layers.into_iter().flatten().flatten().collect();
        Self { names, grads }
    }

    pub fn zeros_like(model: &HostModel) -> Self {
        let params = model.parameters();
        Self {
            names: params.iter().map(|(n, _)| n.clone()).collect(),
            grads: params.iter().map(|(_, p)| Matrix::zeros(p.rows(), p.cols())).collect(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.grads
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.names.iter().position(|n| n == name).map(|i| &self.grads[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.grads)
    }

    pub fn max_abs(&self) -> f64 {
        self.grads.iter().map(Matrix::max_abs).fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.grads.iter().all(Matrix::is_zero)
    }
}

pub fn loss(model: &HostModel, batch: &TaskBatch) -> Result<f64> {
    let (out, _) = model.forward(batch.task_index, &batch.inputs)?;
    mse(&out, &batch.targets)
}

/// Loss and exact gradients for `batch`, given the cache from
/// `model.forward(batch.task_index, &batch.inputs)`.
pub fn backward(model: &HostModel, batch: &TaskBatch, cache: &ForwardCache) -> Result<(f64, GradientSet)> {
    if cache.task != batch.task_index {
        return Err(Error::StaleCache(format!(
            "cache is for task {}, batch is task {}",
            cache.task, batch.task_index
        )));
    }
    if cache.input_digest != digest_matrix(&batch.inputs) {
        return Err(Error::StaleCache("cache was computed on different inputs".into()));
    }
    let loss = mse(&cache.output, &batch.targets)?;
    let upstream = mse_grad(&cache.output, &batch.targets)?;
    let grads = backward_from(model, cache, &upstream)?;
    Ok((loss, grads))
}

/// Parameter gradients for an arbitrary upstream `dL/d(output)`.
pub fn backward_from(model: &HostModel, cache: &ForwardCache, upstream: &Matrix) -> Result<GradientSet> {
    let layers = model.backward(cache, upstream)?;
    Ok(GradientSet::from_layers(model, layers))
}

pub fn loss_and_grads(model: &HostModel, batch: &TaskBatch) -> Result<(f64, GradientSet)> {
    let (_, cache) = model.forward(batch.task_index, &batch.inputs)?;
    backward(model, batch, &cache)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamSelector {
    All,
    Group(ParamGroup),
    Layer(usize),
    /// One tensor by its qualified name, e.g. `layer1.B.0`.
    Named(String),
}

impl ParamSelector {
    pub fn matches(&self, name: &str) -> bool {
        match self {
            ParamSelector::All => true,
            ParamSelector::Group(g) => ParamGroup::of(name) == *g,
            ParamSelector::Layer(l) => name.starts_with(&format!("layer{l}.")),
            ParamSelector::Named(n) => name == n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// `|g_a − g_fd| / max(1, |g_a|, |g_fd|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares analytic gradients with central differences
/// `(L(θ+ε) − L(θ−ε)) / 2ε` for every selected scalar. Each entry is restored
/// bit-exactly after probing.
pub fn finite_diff_check(model: &mut HostModel, batch: &TaskBatch, selector: &ParamSelector, epsilon: f64) -> Result<FdReport> {
    if !(epsilon > 0.0 && epsilon < 1e-2) {
        return Err(Error::InvalidParameter(format!("epsilon {epsilon} outside (0, 1e-2)")));
    }
    let (_, grads) = loss_and_grads(model, batch)?;
    let names: Vec<String> = grads.names().to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (p, name) in names.iter().enumerate() {
        if !selector.matches(name) {
            continue;
        }
        let len = grads.tensors()[p].len();
        for k in 0..len {
            let original = model.parameters_mut()[p].as_slice()[k];
            model.parameters_mut()[p].as_mut_slice()[k] = original + epsilon;
            let plus = loss(model, batch)?;
            model.parameters_mut()[p].as_mut_slice()[k] = original - epsilon;
            let minus = loss(model, batch)?;
            model.parameters_mut()[p].as_mut_slice()[k] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(grads.tensors()[p].as_slice()[k], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((name.clone(), k));
            }
        }
    }
    Ok(report)
}
