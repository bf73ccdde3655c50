//! Two-layer perceptron with a 360-way viewpoint head, plus Adam.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::TripletScale;
use crate::viewgeom::{ViewpointDistribution, NUM_CLASSES};

/// Trainable parameters: `tanh(W1·x + b1)` feeds a linear 360-logit head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `hidden_dim x input_dim`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `360 x hidden_dim`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub scale: TripletScale,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    /// Hidden activation; the embedding for pair and triplet losses.
    pub hidden: Vec<f64>,
    /// Head output before the softmax; the embedding for the flip loss.
    pub logits: Vec<f64>,
    pub distribution: ViewpointDistribution,
}

/// Which parameter tensors an optimizer step may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMask {
    All,
    HeadOnly,
}

impl ToyModel {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            w1: vec![0.0; hidden_dim * input_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; NUM_CLASSES * hidden_dim],
            b2: vec![0.0; NUM_CLASSES],
            scale: TripletScale::default(),
        }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn xavier<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(input_dim, hidden_dim);
        let fill = |w: &mut [f64], fan_in: usize, fan_out: usize, rng: &mut R| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let u = Uniform::new_inclusive(-a, a).expect("finite bounds");
            for x in w {
                *x = u.sample(rng);
            }
        };
        fill(&mut m.w1, input_dim, hidden_dim, rng);
        fill(&mut m.w2, hidden_dim, NUM_CLASSES, rng);
        m
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = [
            (self.w1.len(), self.hidden_dim * self.input_dim),
            (self.b1.len(), self.hidden_dim),
            (self.w2.len(), NUM_CLASSES * self.hidden_dim),
            (self.b2.len(), NUM_CLASSES),
        ];
        for (got, expected) in shapes {
            if got != expected {
                return Err(Error::DimensionMismatch { expected, got });
            }
        }
        if self.tensors().iter().any(|t| t.iter().any(|x| !x.is_finite())) {
            return Err(Error::OutOfRange("model weights must be finite".into()));
        }
        Ok(())
    }

    /// Parameter tensors in a fixed order: w1, b1, w2, b2, scale.
    pub fn tensors(&self) -> [&[f64]; 5] {
        [
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            std::slice::from_ref(&self.scale.0),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            std::slice::from_mut(&mut self.scale.0),
        ]
    }

    /// Indices into [`Self::tensors`] that `mask` leaves trainable.
    pub fn trainable(mask: ParamMask) -> &'static [usize] {
        match mask {
            ParamMask::All => &[0, 1, 2, 3, 4],
            ParamMask::HeadOnly => &[2, 3],
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardPass> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let hidden: Vec<f64> = (0..self.hidden_dim)
            .map(|j| {
                let row = &self.w1[j * self.input_dim..(j + 1) * self.input_dim];
                (self.b1[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).tanh()
            })
            .collect();
        let logits: Vec<f64> = (0..NUM_CLASSES)
            .map(|k| {
                let row = &self.w2[k * self.hidden_dim..(k + 1) * self.hidden_dim];
                self.b2[k] + row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>()
            })
            .collect();
        let distribution = ViewpointDistribution::softmax(&logits)?;
        Ok(ForwardPass {
            hidden,
            logits,
            distribution,
        })
    }

    pub fn forward_batch(&self, xs: &[&[f64]]) -> Result<Vec<ForwardPass>> {
        xs.iter().map(|x| self.forward(x)).collect()
    }

    /// Accumulates parameter gradients for one input given the loss gradient
    /// with respect to its logits and its hidden activation.
    pub fn backward(&self, x: &[f64], pass: &ForwardPass, d_logits: &[f64], d_hidden: &[f64], grads: &mut Gradients) {
        let h = self.hidden_dim;
        let mut dh = d_hidden.to_vec();
        for (k, &g) in d_logits.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.b2[k] += g;
            let row = k * h;
            for j in 0..h {
                grads.w2[row + j] += g * pass.hidden[j];
                dh[j] += g * self.w2[row + j];
            }
        }
        for j in 0..h {
            let dz = dh[j] * (1.0 - pass.hidden[j] * pass.hidden[j]);
            grads.b1[j] += dz;
            let row = j * self.input_dim;
            for (i, &v) in x.iter().enumerate() {
                grads.w1[row + i] += dz * v;
            }
        }
    }
}

/// Gradient buffers shaped like a [`ToyModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub scale: f64,
}

impl Gradients {
    pub fn zeros_like(m: &ToyModel) -> Self {
        Self {
            w1: vec![0.0; m.w1.len()],
            b1: vec![0.0; m.b1.len()],
            w2: vec![0.0; m.w2.len()],
            b2: vec![0.0; m.b2.len()],
            scale: 0.0,
        }
    }

    pub fn tensors(&self) -> [&[f64]; 5] {
        [&self.w1, &self.b1, &self.w2, &self.b2, std::slice::from_ref(&self.scale)]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            std::slice::from_mut(&mut self.scale),
        ]
    }

    pub fn scale_by(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for g in t {
                *g *= factor;
            }
        }
    }
}

/// Adam hyperparameters and moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Updates applied so far; drives bias correction.
    pub t: u64,
    pub m: Gradients,
    pub v: Gradients,
}

impl OptimizerState {
    pub const DEFAULT_STEP_SIZE: f64 = 1e-4;

    pub fn new(model: &ToyModel, step_size: f64) -> Self {
        Self {
            step_size,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: Gradients::zeros_like(model),
            v: Gradients::zeros_like(model),
        }
    }

    pub fn validate(&self, model: &ToyModel) -> Result<()> {
        for (g, w) in self.m.tensors().iter().chain(self.v.tensors().iter()).zip(model.tensors().iter().cycle()) {
            if g.len() != w.len() {
                return Err(Error::DimensionMismatch {
                    expected: w.len(),
                    got: g.len(),
                });
            }
        }
        Ok(())
    }

    /// One bias-corrected Adam update of the tensors selected by `mask`.
    pub fn apply(&mut self, model: &mut ToyModel, grads: &Gradients, mask: ParamMask) {
        self.t += 1;
        let t = self.t as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.step_size, self.epsilon);
        let g_all = grads.tensors();
        let mut w_all = model.tensors_mut();
        let mut m_all = self.m.tensors_mut();
        let mut v_all = self.v.tensors_mut();
        for &idx in ToyModel::trainable(mask) {
            let (w, g) = (&mut w_all[idx], g_all[idx]);
            let (m, v) = (&mut m_all[idx], &mut v_all[idx]);
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_uniform() {
        let m = ToyModel::zeros(8, 4);
        let p = m.forward(&[1.0; 8]).unwrap();
        assert!(p.distribution.as_slice().iter().all(|&q| (q - 1.0 / 360.0).abs() < 1e-15));
        assert!(matches!(m.forward(&[1.0; 7]), Err(Error::DimensionMismatch { expected: 8, got: 7 })));
    }

    #[test]
    fn batch_is_order_preserving_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = ToyModel::xavier(32, 64, &mut rng);
        let xs: Vec<Vec<f64>> = (0..32).map(|i| (0..32).map(|j| ((i * 7 + j) as f64).sin()).collect()).collect();
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let out = m.forward_batch(&refs).unwrap();
        assert_eq!(out.len(), 32);
        for (x, p) in refs.iter().zip(&out) {
            assert_eq!(p, &m.forward(x).unwrap());
            assert!((p.distribution.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_step_size_leaves_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = ToyModel::xavier(6, 5, &mut rng);
        let before = m.clone();
        let mut g = Gradients::zeros_like(&m);
        for t in g.tensors_mut() {
            for x in t {
                *x = 0.3;
            }
        }
        let mut opt = OptimizerState::new(&m, 0.0);
        opt.apply(&mut m, &g, ParamMask::All);
        assert_eq!(m, before);
        let mut opt = OptimizerState::new(&m, 1e-2);
        opt.apply(&mut m, &g, ParamMask::HeadOnly);
        assert_eq!(m.w1, before.w1);
        assert_ne!(m.w2, before.w2);
    }
}
