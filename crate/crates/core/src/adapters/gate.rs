use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{kaiming_uniform, Matrix, Rng};

use super::Mixing;

/// Single affine layer followed by a softmax over experts. The input
/// features are the column mean of the layer input, so a batch is routed as
/// a unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateNetwork {
    pub weights: Matrix,
    pub bias: Matrix,
}

#[derive(Debug, Clone)]
pub struct GateCache {
    pub features: Matrix,
    pub probs: Vec<f64>,
    /// Weights actually used for mixing: `probs` in soft mode, one-hot in top-1.
    pub applied: Vec<f64>,
    pub mixing: Mixing,
}

pub struct GateGrads {
    pub d_weights: Matrix,
    pub d_bias: Matrix,
    pub d_input: Matrix,
    pub d_logits: Vec<f64>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax Jacobian-vector product: `p ⊙ (g − ⟨p, g⟩)`.
pub fn softmax_backward(probs: &[f64], upstream: &[f64]) -> Vec<f64> {
    let inner: f64 = probs.iter().zip(upstream).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(upstream)
        .map(|(p, g)| p * (g - inner))
        .collect()
}

impl GateNetwork {
    pub fn new(weights: Matrix, bias: Matrix) -> Result<Self> {
        if bias.cols() != 1 || bias.rows() != weights.rows() {
            return Err(Error::Shape {
                op: "gate",
                left: weights.shape(),
                right: bias.shape(),
            });
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(num_experts: usize, d_in: usize) -> Self {
        Self {
            weights: Matrix::zeros(num_experts, d_in),
            bias: Matrix::zeros(num_experts, 1),
        }
    }

    /// Kaiming-uniform weights, zero bias. Random weights break the symmetry
    /// between zero-initialized experts.
    pub fn init(num_experts: usize, d_in: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            weights: kaiming_uniform(num_experts, d_in, d_in, rng)?,
            bias: Matrix::zeros(num_experts, 1),
        })
    }

    pub fn num_experts(&self) -> usize {
        self.weights.rows()
    }

    pub fn d_in(&self) -> usize {
        self.weights.cols()
    }

    pub fn logits(&self, x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        if x.rows() != self.d_in() {
            return Err(Error::Shape {
                op: "gate_weights",
                left: self.weights.shape(),
                right: x.shape(),
            });
        }
        let features = x.column_mean();
        let logits = self.weights.matmul(&features)?.add(&self.bias)?;
        Ok((features, logits.into_vec()))
    }

    pub fn forward(&self, x: &Matrix, mixing: Mixing) -> Result<GateCache> {
        let (features, logits) = self.logits(x)?;
        let probs = softmax(&logits);
        let applied = match mixing {
            Mixing::Soft => probs.clone(),
            Mixing::Top1 => {
                // first index wins ties
                let best = probs
                    .iter()
                    .enumerate()
                    .fold(0, |best, (j, &p)| if p > probs[best] { j } else { best });
                (0..probs.len()).map(|j| if j == best { 1.0 } else { 0.0 }).collect()
            }
        };
        Ok(GateCache {
            features,
            probs,
            applied,
            mixing,
        })
    }

    /// Backpropagates `dL/d(applied weight)` into the gate parameters and the
    /// layer input. Top-1 routing is piecewise constant, so it passes no
    /// gradient.
    pub fn backward(&self, cache: &GateCache, d_applied: &[f64], batch: usize) -> Result<GateGrads> {
        let j = self.num_experts();
        let d_logits = match cache.mixing {
            Mixing::Soft => softmax_backward(&cache.probs, d_applied),
            Mixing::Top1 => vec![0.0; j],
        };
        let dl = Matrix::from_vec(j, 1, d_logits.clone())?;
        let d_weights = dl.matmul_t(&cache.features)?;
        let d_features = self.weights.t_matmul(&dl)?;
        let inv = 1.0 / batch as f64;
        let d_input = Matrix::from_fn(self.d_in(), batch, |r, _| d_features.get(r, 0) * inv);
        Ok(GateGrads {
            d_weights,
            d_bias: dl,
            d_input,
            d_logits,
        })
    }
}

/// Mixing weights for a batch: softmax of the gate logits on the pooled input.
pub fn gate_weights(gate: &GateNetwork, x: &Matrix) -> Result<Vec<f64>> {
    let (_, logits) = gate.logits(x)?;
    Ok(softmax(&logits))
}

/// Shannon entropy in nats.
pub fn entropy(weights: &[f64]) -> f64 {
    -weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|w| w * w.ln())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_logits_give_uniform_weights() {
        for j in 1..5 {
            let gate = GateNetwork::zeros(j, 3);
            let x = Rng::new(1).normal_matrix(3, 4, 1.0);
            let w = gate_weights(&gate, &x).unwrap();
            assert!(w.iter().all(|&v| (v - 1.0 / j as f64).abs() < 1e-15));
        }
    }

    #[test]
    fn closed_form_two_way_softmax() {
        // logits (ln 2, 0) through the bias
        let gate = GateNetwork::new(
            Matrix::zeros(2, 2),
            Matrix::column(&[2f64.ln(), 0.0]).unwrap(),
        )
        .unwrap();
        let w = gate_weights(&gate, &Matrix::column(&[0.3, -1.0]).unwrap()).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn shift_invariance() {
        let logits = [0.3, -1.2, 2.5];
        let shifted: Vec<f64> = logits.iter().map(|l| l + 17.0).collect();
        let a = softmax(&logits);
        let b = softmax(&shifted);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_gradients_sum_to_zero() {
        let probs = softmax(&[0.1, 0.7, -0.4]);
        let d = softmax_backward(&probs, &[1.5, -2.0, 0.25]);
        assert!(d.iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn top1_is_one_hot() {
        let gate = GateNetwork::new(
            Matrix::zeros(3, 2),
            Matrix::column(&[0.0, 2.0, 1.0]).unwrap(),
        )
        .unwrap();
        let cache = gate.forward(&Matrix::zeros(2, 1), Mixing::Top1).unwrap();
        assert_eq!(cache.applied, vec![0.0, 1.0, 0.0]);
        let g = gate.backward(&cache, &[1.0, 2.0, 3.0], 1).unwrap();
        assert!(g.d_weights.is_zero() && g.d_bias.is_zero());
    }

    #[test]
    fn entropy_of_uniform() {
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
    }

    #[test]
    fn shape_mismatch() {
        let gate = GateNetwork::zeros(2, 3);
        assert!(gate_weights(&gate, &Matrix::zeros(4, 1)).is_err());
        assert!(GateNetwork::new(Matrix::zeros(2, 3), Matrix::zeros(3, 1)).is_err());
    }
}
