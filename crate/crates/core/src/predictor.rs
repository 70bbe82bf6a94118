//! Unimodal predictors: a linear-softmax classifier per modality, or a passthrough for
//! datasets that already store predictive distributions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{ProbVector, CLAMP};
use crate::special::{softmax, softmax_backward};

/// `softmax(Wᵀx + b)` with `W` stored as `d` rows of length `K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnimodalPredictor {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorGrads {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl UnimodalPredictor {
    pub fn zeros(dim: usize, num_classes: usize) -> Self {
        UnimodalPredictor {
            weights: vec![vec![0.0; num_classes]; dim],
            bias: vec![0.0; num_classes],
        }
    }

    /// Small Gaussian weights, zero bias.
    pub fn random(dim: usize, num_classes: usize, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("finite std");
        UnimodalPredictor {
            weights: (0..dim)
                .map(|_| (0..num_classes).map(|_| normal.sample(&mut rng)).collect())
                .collect(),
            bias: vec![0.0; num_classes],
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::InvalidDimensions(format!(
                "feature vector of length {} for a predictor of dimension {}",
                x.len(),
                self.dim()
            )));
        }
        let mut z = self.bias.clone();
        for (xi, row) in x.iter().zip(&self.weights) {
            for (zk, w) in z.iter_mut().zip(row) {
                *zk += xi * w;
            }
        }
        Ok(z)
    }

    pub fn forward(&self, x: &[f64]) -> Result<ProbVector> {
        Ok(ProbVector::new_unchecked(softmax(&self.logits(x)?)))
    }

    /// Accumulates `dL/dW, dL/db` given the output `p` and `dL/dp`.
    pub fn backward_into(&self, x: &[f64], p: &[f64], dp: &[f64], out: &mut PredictorGrads) {
        let dz = softmax_backward(p, dp);
        for (xi, row) in x.iter().zip(out.weights.iter_mut()) {
            for (g, d) in row.iter_mut().zip(&dz) {
                *g += xi * d;
            }
        }
        for (g, d) in out.bias.iter_mut().zip(&dz) {
            *g += d;
        }
    }

    pub fn zero_grads(&self) -> PredictorGrads {
        PredictorGrads {
            weights: vec![vec![0.0; self.num_classes()]; self.dim()],
            bias: vec![0.0; self.num_classes()],
        }
    }

    pub fn params(&self) -> Vec<f64> {
        self.weights.iter().flatten().chain(&self.bias).copied().collect()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let k = self.num_classes();
        if params.len() != (self.dim() + 1) * k {
            return Err(Error::InvalidDimensions("predictor parameter count".into()));
        }
        for (row, chunk) in self.weights.iter_mut().zip(params.chunks(k)) {
            row.copy_from_slice(chunk);
        }
        let offset = self.dim() * k;
        self.bias.copy_from_slice(&params[offset..]);
        Ok(())
    }
}

impl PredictorGrads {
    pub fn flatten(&self) -> Vec<f64> {
        self.weights.iter().flatten().chain(&self.bias).copied().collect()
    }
}

/// Per-modality predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predictor {
    Linear(UnimodalPredictor),
    /// Inputs are already predictive distributions; nothing to learn.
    Passthrough,
}

/// Cross-entropy `-ln p[y]` (with `p[y]` clamped at 1e-12) and its gradient w.r.t. `p`.
pub fn cross_entropy(p: &[f64], y: usize) -> (f64, Vec<f64>) {
    let py = p[y].max(CLAMP);
    let mut grad = vec![0.0; p.len()];
    grad[y] = -1.0 / py;
    (-py.ln(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::finite_difference_check;

    #[test]
    fn zero_predictor_is_uniform() {
        let p = UnimodalPredictor::zeros(3, 4).forward(&[1.0, -2.0, 0.5]).unwrap();
        assert!(p.values().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn bias_only_predictor() {
        let mut pred = UnimodalPredictor::zeros(2, 2);
        pred.bias = vec![10.0, 0.0];
        let p = pred.forward(&[3.0, 4.0]).unwrap();
        let want = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((p[0] - want).abs() < 1e-15);
        assert!((p[0] - 0.99995).abs() < 1e-5);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        assert!(UnimodalPredictor::zeros(3, 2).forward(&[1.0]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[1.0, 0.0, 0.0], 0).0, 0.0);
        let u = vec![0.1; 10];
        assert!((cross_entropy(&u, 7).0 - 10f64.ln()).abs() < 1e-12);
        let (l, g) = cross_entropy(&[0.25, 0.75], 1);
        assert!((l - 0.287_682_072_451_780_9).abs() < 1e-12);
        assert_eq!(g[0], 0.0);
        assert!((g[1] + 1.0 / 0.75).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_through_softmax_gradient() {
        let pred = UnimodalPredictor::random(4, 3, 0.8, 2);
        let x = [0.3, -1.2, 0.8, 2.0];
        let f = |theta: &[f64]| {
            let mut p = pred.clone();
            p.set_params(theta).unwrap();
            cross_entropy(p.forward(&x).unwrap().values(), 2).0
        };
        let p = pred.forward(&x).unwrap();
        let (_, dp) = cross_entropy(p.values(), 2);
        let mut g = pred.zero_grads();
        pred.backward_into(&x, p.values(), &dp, &mut g);
        let err = finite_difference_check(f, &pred.params(), &g.flatten(), 1e-5);
        assert!(err <= 1e-5, "{err}");
    }
}
