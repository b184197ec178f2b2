use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::graph::{Activation, Graph, Var};
use super::tensor::Tensor;
use crate::rng::Rng;
use crate::{EmaiError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `[fan_in, fan_out]`
    pub weight: Tensor,
    /// `[fan_out]`
    pub bias: Tensor,
}

/// Fully connected network. `activations[i]` follows layer `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Linear>,
    activations: Vec<Activation>,
}

impl Mlp {
    /// Weights and biases uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn new(sizes: &[usize], activations: &[Activation], rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 || sizes.contains(&0) {
            return Err(EmaiError::invalid(format!(
                "mlp needs >= 2 non-zero sizes and one activation per layer (sizes {sizes:?}, {} activations)",
                activations.len()
            )));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight: Vec<f64> =
                    (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
                let bias: Vec<f64> = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
                Linear {
                    weight: Tensor::new(vec![fan_in, fan_out], weight).expect("sized"),
                    bias: Tensor::new(vec![fan_out], bias).expect("sized"),
                }
            })
            .collect();
        Ok(Mlp {
            layers,
            activations: activations.to_vec(),
        })
    }

    /// Hidden layers with `hidden` activation, identity output.
    pub fn with_hidden(
        input: usize,
        hidden: &[usize],
        output: usize,
        act: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        let mut acts = vec![act; hidden.len()];
        acts.push(Activation::Identity);
        Self::new(&sizes, &acts, rng)
    }

    pub fn from_layers(layers: Vec<Linear>, activations: Vec<Activation>) -> Result<Self> {
        if layers.is_empty() || layers.len() != activations.len() {
            return Err(EmaiError::invalid("layer/activation count mismatch"));
        }
        for w in layers.windows(2) {
            if w[0].weight.cols() != w[1].weight.rows() {
                return Err(EmaiError::Shape {
                    op: "mlp layers",
                    left: w[0].weight.shape().to_vec(),
                    right: w[1].weight.shape().to_vec(),
                });
            }
        }
        for l in &layers {
            if l.weight.shape().len() != 2 || l.bias.len() != l.weight.cols() {
                return Err(EmaiError::Shape {
                    op: "mlp bias",
                    left: l.weight.shape().to_vec(),
                    right: l.bias.shape().to_vec(),
                });
            }
        }
        Ok(Mlp { layers, activations })
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().expect("non-empty").weight.cols()
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters in a fixed order: `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Registers the parameters on `g`, in [`Mlp::params`] order.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> Vec<Var> {
        self.params().into_iter().map(|p| g.param(p)).collect()
    }

    /// Registers the parameters as constants (no gradient).
    pub fn bind_frozen<'a>(&'a self, g: &mut Graph<'a>) -> Vec<Var> {
        self.params().into_iter().map(|p| g.constant(p)).collect()
    }

    pub fn forward_graph(&self, g: &mut Graph<'_>, vars: &[Var], x: Var) -> Result<Var> {
        let cols = g.value(x).cols();
        if cols != self.input_size() {
            return Err(EmaiError::Shape {
                op: "mlp forward",
                left: g.value(x).shape().to_vec(),
                right: vec![self.input_size()],
            });
        }
        let mut h = x;
        for (i, act) in self.activations.iter().enumerate() {
            let z = g.matmul(h, vars[2 * i])?;
            let z = g.add_bias(z, vars[2 * i + 1])?;
            h = g.activation(z, *act)?;
        }
        Ok(h)
    }

    /// Plain forward pass on a `[batch, input]` tensor (no gradient tracking).
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g);
        let x = g.constant(input);
        let y = self.forward_graph(&mut g, &vars, x)?;
        Ok(g.value(y).clone())
    }

    pub fn zeroed(mut self) -> Self {
        for p in self.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        self
    }
}
