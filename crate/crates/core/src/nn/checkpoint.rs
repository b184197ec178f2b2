use serde::{Deserialize, Serialize};

use super::graph::Activation;
use super::mlp::{Linear, Mlp};
use super::tensor::Tensor;
use crate::{EmaiError, Result};

/// One tensor of a parameter document: `{"name", "shape", "values"}` with
/// values in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDoc {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// JSON form of one MLP: activations plus `weight`/`bias` entries per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamDoc {
    pub activations: Vec<Activation>,
    pub layers: Vec<LayerDoc>,
}

impl ParamDoc {
    pub fn from_mlp(mlp: &Mlp) -> Self {
        let layers = mlp
            .layers()
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    LayerDoc {
                        name: format!("layer{i}.weight"),
                        shape: l.weight.shape().to_vec(),
                        values: l.weight.data().to_vec(),
                    },
                    LayerDoc {
                        name: format!("layer{i}.bias"),
                        shape: l.bias.shape().to_vec(),
                        values: l.bias.data().to_vec(),
                    },
                ]
            })
            .collect();
        ParamDoc {
            activations: mlp.activations().to_vec(),
            layers,
        }
    }

    pub fn to_mlp(&self) -> Result<Mlp> {
        if self.layers.len() != 2 * self.activations.len() {
            return Err(EmaiError::Checkpoint(format!(
                "{} tensors for {} layers",
                self.layers.len(),
                self.activations.len()
            )));
        }
        let tensor = |d: &LayerDoc| {
            Tensor::new(d.shape.clone(), d.values.clone())
                .map_err(|e| EmaiError::Checkpoint(format!("{}: {e}", d.name)))
        };
        let layers = self
            .layers
            .chunks(2)
            .map(|c| {
                Ok(Linear {
                    weight: tensor(&c[0])?,
                    bias: tensor(&c[1])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Mlp::from_layers(layers, self.activations.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn mlp_json_roundtrip_is_exact() {
        let m = Mlp::with_hidden(5, &[7, 3], 2, Activation::Elu, &mut rng_from(9)).unwrap();
        let json = serde_json::to_string(&ParamDoc::from_mlp(&m)).unwrap();
        let back: ParamDoc = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_mlp().unwrap(), m);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = r#"{"activations":["relu"],"layers":[],"extra":1}"#;
        assert!(serde_json::from_str::<ParamDoc>(bad).is_err());
    }
}
