//! Frozen base network with adapter attachment points.

use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{Adapter, AdapterCache, AdapterSpec, SchemeRegistry};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Relu => 1,
            Activation::Identity => 0,
        }
    }

    pub fn apply(self, z: &Matrix) -> Matrix {
        match self {
            Activation::Relu => z.map(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Identity => z.clone(),
        }
    }

    /// Multiplies `grad` by the derivative at `z`; relu'(0) is taken as 0.
    pub fn backward(self, z: &Matrix, grad: &Matrix) -> Result<Matrix> {
        match self {
            Activation::Relu => {
                let mask = z.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                grad.hadamard(&mask)
            }
            Activation::Identity => Ok(grad.clone()),
        }
    }
}

/// One frozen affine layer `act(W·h + bias)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Matrix,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Matrix, activation: Activation) -> Result<Self> {
        if bias.shape() != (weight.rows(), 1) {
            return Err(Error::Shape {
                op: "layer bias",
                left: weight.shape(),
                right: bias.shape(),
            });
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }
}

/// SHA-256 over every base weight and bias, in layer order.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fingerprint(pub [u8; 32]);

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({self})")
    }
}

/// Intermediate values from [`HostModel::forward`], consumed by the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub task: usize,
    pub input_digest: u64,
    pub version: u64,
    /// Input to each layer; `inputs[0]` is the batch.
    pub inputs: Vec<Matrix>,
    pub pre_activations: Vec<Matrix>,
    pub adapters: Vec<Option<AdapterCache>>,
    pub output: Matrix,
}

impl ForwardCache {
    pub fn min_abs_relu_preactivation(&self, model: &HostModel) -> f64 {
        model
            .layers
            .iter()
            .zip(&self.pre_activations)
            .filter(|(l, _)| l.activation == Activation::Relu)
            .flat_map(|(_, z)| z.as_slice().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }
}

pub(crate) fn digest_matrix(m: &Matrix) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    m.shape().hash(&mut h);
    for v in m.as_slice() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

#[derive(Debug, Clone)]
pub struct HostModel {
    layers: Vec<Layer>,
    adapters: Vec<Option<Box<dyn Adapter>>>,
    version: u64,
}

impl HostModel {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("host model needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(Error::Shape {
                    op: "host layers",
                    left: pair[0].weight.shape(),
                    right: pair[1].weight.shape(),
                });
            }
        }
        let adapters = (0..layers.len()).map(|_| None).collect();
        Ok(Self {
            layers,
            adapters,
            version: 0,
        })
    }

    /// Random MLP through `widths` (input, hidden.., output): relu between
    /// layers, identity on the last. Weights are N(0, 2/fan_in), biases
    /// N(0, 0.1²).
    pub fn random(widths: &[usize], rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidParameter(format!("bad host widths {widths:?}")));
        }
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let std = (2.0 / w[0] as f64).sqrt();
                let weight = rng.normal_matrix(w[1], w[0], std);
                let bias = rng.normal_matrix(w[1], 1, 0.1);
                let act = if l == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                Layer::new(weight, bias, act)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out()
    }

    /// Bumped whenever adapter parameters are handed out mutably.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn attach(&mut self, layer: usize, adapter: Box<dyn Adapter>) -> Result<()> {
        let l = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::InvalidParameter(format!("no layer {layer}")))?;
        let spec = adapter.spec();
        if (spec.d_in, spec.d_out) != (l.d_in(), l.d_out()) {
            return Err(Error::Shape {
                op: "attach adapter",
                left: l.weight.shape(),
                right: (spec.d_out, spec.d_in),
            });
        }
        self.adapters[layer] = Some(adapter);
        self.version += 1;
        Ok(())
    }

    /// Builds one adapter per selected layer from `template` (dims are filled
    /// in per layer). Layer `l` draws from its own stream `derive(seed,
    /// "adapter.l")`, so the draws of one layer never shift another's.
    pub fn attach_scheme(
        &mut self,
        registry: &SchemeRegistry,
        template: &AdapterSpec,
        adapt: &[bool],
        seed: u64,
    ) -> Result<()> {
        let factory = registry.get(template.kind.name())?;
        for l in 0..self.layers.len() {
            if !adapt.get(l).copied().unwrap_or(true) {
                continue;
            }
            let spec = AdapterSpec {
                d_in: self.layers[l].d_in(),
                d_out: self.layers[l].d_out(),
                ..*template
            };
            let mut rng = Rng::derive(seed, &format!("adapter.{l}"));
            let adapter = factory.build(&spec, &mut rng)?;
            self.attach(l, adapter)?;
        }
        Ok(())
    }

    pub fn detach_all(&mut self) {
        for a in &mut self.adapters {
            *a = None;
        }
        self.version += 1;
    }

    pub fn adapter(&self, layer: usize) -> Option<&dyn Adapter> {
        self.adapters.get(layer).and_then(|a| a.as_deref())
    }

    pub fn adapter_mut(&mut self, layer: usize) -> Option<&mut Box<dyn Adapter>> {
        self.version += 1;
        self.adapters.get_mut(layer).and_then(|a| a.as_mut())
    }

    pub fn adapters(&self) -> impl Iterator<Item = (usize, &dyn Adapter)> {
        self.adapters
            .iter()
            .enumerate()
            .filter_map(|(l, a)| a.as_deref().map(|a| (l, a)))
    }

    /// Number of tasks the attached adapters accept (1 if none attached).
    pub fn num_tasks(&self) -> usize {
        self.adapters().map(|(_, a)| a.spec().num_tasks).max().unwrap_or(1)
    }

    /// `(qualified name, tensor)` for every trainable parameter, in the order
    /// used by gradients and optimizers. Names are `layer{l}.{param}`.
    pub fn parameters(&self) -> Vec<(String, &Matrix)> {
        self.adapters()
            .flat_map(|(l, a)| {
                a.param_names()
                    .into_iter()
                    .zip(a.params())
                    .map(move |(n, p)| (format!("layer{l}.{n}"), p))
            })
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        self.version += 1;
        self.adapters
            .iter_mut()
            .flatten()
            .flat_map(|a| a.params_mut())
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.adapters().map(|(_, a)| a.num_trainable()).sum()
    }

    /// Forward pass with adapters ignored.
    pub fn base_forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            let z = layer.weight.matmul(&h)?.add_column(&layer.bias)?;
            h = layer.activation.apply(&z);
        }
        Ok(h)
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.d_in() {
            return Err(Error::Shape {
                op: "host forward",
                left: self.layers[0].weight.shape(),
                right: x.shape(),
            });
        }
        Ok(())
    }

    /// Layer-by-layer `act(W·h + bias + adapter(h))`.
    pub fn forward(&self, task: usize, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.check_input(x)?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre_activations = Vec::with_capacity(n);
        let mut caches = Vec::with_capacity(n);
        let mut h = x.clone();
        for (layer, adapter) in self.layers.iter().zip(&self.adapters) {
            let mut z = layer.weight.matmul(&h)?.add_column(&layer.bias)?;
            let cache = match adapter {
                Some(a) => {
                    let (delta, cache) = a.forward(task, &h)?;
                    z.add_assign(&delta)?;
                    Some(cache)
                }
                None => None,
            };
            let next = layer.activation.apply(&z);
            inputs.push(std::mem::replace(&mut h, next));
            pre_activations.push(z);
            caches.push(cache);
        }
        let cache = ForwardCache {
            task,
            input_digest: digest_matrix(x),
            version: self.version,
            inputs,
            pre_activations,
            adapters: caches,
            output: h.clone(),
        };
        Ok((h, cache))
    }

    /// Reverse pass from `dL/d(output)`. Returns per-layer adapter gradients
    /// (`None` where no adapter is attached). Base weights get no gradient.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &Matrix) -> Result<Vec<Option<Vec<Matrix>>>> {
        if cache.version != self.version {
            return Err(Error::StaleCache(format!(
                "cache from parameter version {}, model is at {}",
                cache.version, self.version
            )));
        }
        if grad_output.shape() != cache.output.shape() {
            return Err(Error::Shape {
                op: "host backward",
                left: cache.output.shape(),
                right: grad_output.shape(),
            });
        }
        let mut grads: Vec<Option<Vec<Matrix>>> = vec![None; self.layers.len()];
        let mut g = grad_output.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let gz = layer.activation.backward(&cache.pre_activations[l], &g)?;
            let h = &cache.inputs[l];
            let mut gh = if l > 0 {
                Some(layer.weight.t_matmul(&gz)?)
            } else {
                None
            };
            if let (Some(adapter), Some(ac)) = (&self.adapters[l], &cache.adapters[l]) {
                let mut buf = adapter.zero_grads();
                let dx = adapter.backward(ac, h, &gz, &mut buf)?;
                if let Some(gh) = gh.as_mut() {
                    gh.add_assign(&dx)?;
                }
                grads[l] = Some(buf);
            }
            match gh {
                Some(next) => g = next,
                None => break,
            }
        }
        Ok(grads)
    }

    pub fn freeze_fingerprint(&self) -> Fingerprint {
        let mut hasher = Sha256::new();
        hasher.update((self.layers.len() as u64).to_le_bytes());
        for layer in &self.layers {
            for m in [&layer.weight, &layer.bias] {
                hasher.update((m.rows() as u64).to_le_bytes());
                hasher.update((m.cols() as u64).to_le_bytes());
                for v in m.as_slice() {
                    hasher.update(v.to_le_bytes());
                }
            }
            hasher.update([layer.activation.tag()]);
        }
        Fingerprint(hasher.finalize().into())
    }

    pub(crate) fn layers_mut_unchecked(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}

pub fn freeze_fingerprint(model: &HostModel) -> Fingerprint {
    model.freeze_fingerprint()
}
