//! Minimal dense layers with hand-written backward passes.
//!
//! Every trainable component implements [`Module`], which walks its named
//! tensors in a fixed order. Gradients use the same types as the parameters
//! they belong to, so optimizers and checkpoints only need the walk.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::math::{self, Stream};

/// Shaped real tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Gaussian entries with standard deviation `sd`, on the `f32` grid.
    pub fn gaussian(shape: &[usize], sd: f64, rng: &mut Stream) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n)
                .map(|_| math::to_f32_grid(sd * rng.sample::<f64, _>(StandardNormal)))
                .collect(),
        }
    }
}

/// A named collection of tensors visited in a stable order.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// All parameters of `m` concatenated in visit order.
pub fn flatten<M: Module + ?Sized>(m: &M) -> Vec<f64> {
    let mut out = Vec::new();
    m.visit("", &mut |_, t| out.extend_from_slice(&t.data));
    out
}

/// Overwrite the parameters of `m` from a flat vector in visit order.
pub fn unflatten<M: Module + ?Sized>(m: &mut M, flat: &[f64]) {
    let mut offset = 0;
    m.visit_mut("", &mut |_, t| {
        let n = t.data.len();
        t.data.copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    });
    assert_eq!(offset, flat.len(), "flat parameter length mismatch");
}

pub fn zero_grad<M: Module + ?Sized>(m: &mut M) {
    m.visit_mut("", &mut |_, t| t.data.iter_mut().for_each(|v| *v = 0.0));
}

pub fn param_count<M: Module + ?Sized>(m: &M) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, t| n += t.data.len());
    n
}

/// Pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative evaluated at the pre-activation `z`.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Affine map `y = W x + b`, `W` stored as `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    /// He-style Gaussian weights, zero bias.
    pub fn init(input: usize, output: usize, rng: &mut Stream) -> Self {
        Self {
            weight: Tensor::gaussian(&[output, input], (2.0 / input as f64).sqrt(), rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let n_in = self.input_dim();
        debug_assert_eq!(x.len(), n_in);
        self.weight
            .data
            .chunks_exact(n_in)
            .zip(&self.bias.data)
            .map(|(row, b)| b + math::dot(row, x))
            .collect()
    }

    /// Accumulate parameter gradients into `grad` and return `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense) -> Vec<f64> {
        let n_in = self.input_dim();
        let mut dx = vec![0.0; n_in];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias.data[o] += g;
            let row = &self.weight.data[o * n_in..(o + 1) * n_in];
            math::axpy(g, x, &mut grad.weight.data[o * n_in..(o + 1) * n_in]);
            math::axpy(g, row, &mut dx);
        }
        dx
    }

    /// `dL/dx` only; parameters are treated as constants.
    pub fn backward_input(&self, dy: &[f64]) -> Vec<f64> {
        let n_in = self.input_dim();
        let mut dx = vec![0.0; n_in];
        for (o, &g) in dy.iter().enumerate() {
            if g != 0.0 {
                math::axpy(g, &self.weight.data[o * n_in..(o + 1) * n_in], &mut dx);
            }
        }
        dx
    }
}

impl Module for Dense {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
