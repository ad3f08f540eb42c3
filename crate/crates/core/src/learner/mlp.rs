use rand::Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use super::LearnerError;
use crate::num::Real;
use crate::rng;

/// Hidden layer widths of the reference regressor.
pub const HIDDEN: [usize; 3] = [80, 80, 80];

/// Fully connected layer; `weights` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense<T = f64> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<T>,
    pub biases: Vec<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![T::zero(); inputs * outputs], biases: vec![T::zero(); outputs] }
    }

    fn affine(&self, x: &[T], out: &mut Vec<T>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.inputs).zip(&self.biases).map(|(row, b)| {
            row.iter().zip(x).fold(*b, |acc, (w, v)| acc + *w * *v)
        }));
    }
}

/// Feed-forward regressor with rectifier hidden layers and a linear scalar output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp<T = f64> {
    pub layers: Vec<Dense<T>>,
}

/// Per-sample activations kept for backpropagation. `acts[0]` is the input;
/// `acts[l + 1]` is the output of layer `l` after its activation.
pub(crate) struct Trace<T> {
    pub acts: Vec<Vec<T>>,
}

impl<T: Real> Mlp<T> {
    /// Reference architecture `input_dim -> 80 -> 80 -> 80 -> 1`.
    pub fn new(seed: u64, input_dim: usize) -> Result<Self, LearnerError> {
        let mut sizes = vec![input_dim];
        sizes.extend(HIDDEN);
        sizes.push(1);
        Self::with_sizes(seed, &sizes)
    }

    /// Weights uniform in `±sqrt(6 / fan_in)`, biases zero.
    pub fn with_sizes(seed: u64, sizes: &[usize]) -> Result<Self, LearnerError> {
        if sizes.len() < 2 || sizes.contains(&0) || sizes[sizes.len() - 1] != 1 {
            return Err(LearnerError::Shape(format!("invalid layer sizes {sizes:?}")));
        }
        let mut rng = rng::stream(seed, "init", 0);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                let limit = (6.0 / inputs as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                let weights = (0..inputs * outputs).map(|_| T::lit(rng.sample(dist))).collect();
                Dense { inputs, outputs, weights, biases: vec![T::zero(); outputs] }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect() }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// All parameters as mutable slices, layer by layer (weights then biases).
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut [T]> {
        self.layers.iter_mut().flat_map(|l| [l.weights.as_mut_slice(), l.biases.as_mut_slice()])
    }

    pub fn params(&self) -> impl Iterator<Item = &[T]> {
        self.layers.iter().flat_map(|l| [l.weights.as_slice(), l.biases.as_slice()])
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|p| p.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &[T]) -> Result<(), LearnerError> {
        if x.len() != self.input_dim() {
            return Err(LearnerError::Shape(format!("expected {} features, got {}", self.input_dim(), x.len())));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[T]) -> Result<T, LearnerError> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.affine(&cur, &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur[0])
    }

    pub(crate) fn forward_trace(&self, x: &[T]) -> Trace<T> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.affine(&acts[i], &mut out);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
            acts.push(out);
        }
        Trace { acts }
    }

    /// Accumulate into `grads` the gradient of `scale * output` for one sample.
    pub(crate) fn backward(&self, trace: &Trace<T>, scale: T, grads: &mut Mlp<T>) {
        let mut delta = vec![scale];
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &trace.acts[l];
            let g = &mut grads.layers[l];
            for (o, d) in delta.iter().enumerate() {
                if *d == T::zero() {
                    continue;
                }
                g.biases[o] += *d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                row.iter_mut().zip(input).for_each(|(gw, a)| *gw += *d * *a);
            }
            if l == 0 {
                break;
            }
            let mut prev = vec![T::zero(); layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                if *d == T::zero() {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                prev.iter_mut().zip(row).for_each(|(p, w)| *p += *d * *w);
            }
            // rectifier derivative: zero where the activation is zero
            prev.iter_mut().zip(input).for_each(|(p, a)| {
                if *a <= T::zero() {
                    *p = T::zero();
                }
            });
            delta = prev;
        }
    }
}
