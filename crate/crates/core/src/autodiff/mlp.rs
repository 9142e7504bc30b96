use rand::Rng;

use super::tensor::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

/// Fully connected network: linear → ReLU chain with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

impl MlpParams {
    /// Glorot-uniform hidden layers, zero biases, and a zero output layer so the initial
    /// output is exactly zero.
    pub fn init(dims: &[usize], rng: &mut impl Rng) -> MlpParams {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let weight = if i + 1 == n {
                    Tensor::zeros(&[fan_in, fan_out])
                } else {
                    let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-lim..lim)).collect();
                    Tensor::matrix(fan_in, fan_out, data).unwrap()
                };
                Layer {
                    weight,
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        MlpParams {
            layers,
            activation: Activation::Relu,
        }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<MlpParams> {
        let p = MlpParams {
            layers,
            activation: Activation::Relu,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::ShapeMismatch("mlp has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let s = l.weight.shape();
            if s.len() != 2 || l.bias.shape() != [s[1]] {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i}: weight {s:?}, bias {:?}",
                    l.bias.shape()
                )));
            }
            if i > 0 && self.layers[i - 1].weight.shape()[1] != s[0] {
                return Err(Error::ShapeMismatch(format!("layer {i} does not chain")));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.shape()[1]
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.weight.shape()[1]));
        d
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn register(&self, g: &mut Graph) -> MlpVars {
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| (g.param(l.weight.clone()), g.param(l.bias.clone())))
                .collect(),
        }
    }

    /// Value-only forward pass over a batch `[n, in]`.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| (g.constant(l.weight.clone()), g.constant(l.bias.clone())))
                .collect(),
        };
        let x = g.constant(input.clone());
        let y = vars.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}

/// An [`MlpParams`] registered on a tape.
#[derive(Debug, Clone)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
}

impl MlpVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let cols = g.value(x).cols();
        let in_dim = g.value(self.layers[0].0).shape()[0];
        if cols != in_dim {
            return Err(Error::ShapeMismatch(format!(
                "mlp input width {cols}, expected {in_dim}"
            )));
        }
        let mut h = x;
        let n = self.layers.len();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = g.matmul(h, *w)?;
            h = g.add_bias(h, *b)?;
            if i + 1 < n {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Gradients in the same order as [`MlpParams::tensors`].
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [grads.get(*w), grads.get(*b)])
            .collect()
    }
}

pub fn mlp_forward(params: &MlpParams, input: &Tensor) -> Result<Tensor> {
    params.forward(input)
}

/// `sin(2^j π x), cos(2^j π x)` for `j = 0..num_freqs`, grouped per component.
pub fn positional_encoding(x: &[f64], num_freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * num_freqs * x.len());
    for &v in x {
        let mut f = std::f64::consts::PI;
        for _ in 0..num_freqs {
            out.push((f * v).sin());
            out.push((f * v).cos());
            f *= 2.0;
        }
    }
    out
}
