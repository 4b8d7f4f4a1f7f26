use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Binding, ParamId, ParameterStore};
use crate::autodiff::{Tape, Var};
use crate::distributions::{DiagonalGaussian, STD_MIN};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
}

/// Output transform of a head. `Exp` heads produce a standard deviation and
/// `Square` heads a variance; both are floored (σ_min and σ_min² respectively).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadTransform {
    Identity,
    Exp,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub dim: usize,
    pub transform: HeadTransform,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden: Vec<LayerSpec>,
    pub heads: Vec<HeadSpec>,
}

impl MlpSpec {
    /// `hidden` layers followed by `{dim identity, dim exp}` heads.
    pub fn gaussian(input_dim: usize, hidden: &[(usize, Activation)], dim: usize) -> Self {
        Self {
            input_dim,
            hidden: hidden
                .iter()
                .map(|&(width, activation)| LayerSpec { width, activation })
                .collect(),
            heads: vec![
                HeadSpec {
                    dim,
                    transform: HeadTransform::Identity,
                },
                HeadSpec {
                    dim,
                    transform: HeadTransform::Exp,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("MLP input_dim must be ≥ 1".into()));
        }
        if self.hidden.iter().any(|l| l.width == 0) {
            return Err(Error::Config("MLP hidden widths must be ≥ 1".into()));
        }
        if self.heads.is_empty() || self.heads.iter().any(|h| h.dim == 0) {
            return Err(Error::Config("MLP needs at least one head of dim ≥ 1".into()));
        }
        Ok(())
    }
}

/// Feed-forward network whose parameters live in a [`ParameterStore`].
#[derive(Debug, Clone)]
pub struct Mlp {
    name: String,
    spec: MlpSpec,
    layers: Vec<(ParamId, ParamId)>,
    heads: Vec<(ParamId, ParamId)>,
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect()
}

impl Mlp {
    /// Registers parameters under `name.*`. Weights are uniform in
    /// ±√(6 / (fan_in + fan_out)) and biases start at zero. Square heads start
    /// with zero weights and unit bias, i.e. unit variance everywhere.
    pub fn build(name: &str, spec: MlpSpec, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut fan_in = spec.input_dim;
        let mut layers = Vec::with_capacity(spec.hidden.len());
        for (i, layer) in spec.hidden.iter().enumerate() {
            let w = store.register(
                &format!("{name}.l{i}.w"),
                &[fan_in, layer.width],
                glorot(rng, fan_in, layer.width),
            )?;
            let b = store.register(&format!("{name}.l{i}.b"), &[layer.width], vec![0.0; layer.width])?;
            layers.push((w, b));
            fan_in = layer.width;
        }
        let mut heads = Vec::with_capacity(spec.heads.len());
        for (j, head) in spec.heads.iter().enumerate() {
            let (w0, b0) = if head.transform == HeadTransform::Square {
                (vec![0.0; fan_in * head.dim], 1.0)
            } else {
                (glorot(rng, fan_in, head.dim), 0.0)
            };
            let w = store.register(&format!("{name}.h{j}.w"), &[fan_in, head.dim], w0)?;
            let b = store.register(&format!("{name}.h{j}.b"), &[head.dim], vec![b0; head.dim])?;
            heads.push((w, b));
        }
        Ok(Self {
            name: name.to_string(),
            spec,
            layers,
            heads,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layer_params(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    pub fn head_params(&self) -> &[(ParamId, ParamId)] {
        &self.heads
    }

    /// Every parameter of the network, weights and biases alike.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .chain(&self.heads)
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }

    /// Last hidden representation (the input itself when there are no hidden layers).
    pub fn trunk(&self, tape: &mut Tape, params: &Binding, input: Var) -> Result<Var> {
        let shape = tape.shape(input);
        if shape.last() != Some(&self.spec.input_dim) {
            return Err(crate::autodiff::AutodiffError::ShapeMismatch {
                op: "mlp_input",
                shapes: vec![shape.to_vec(), vec![self.spec.input_dim]],
            }
            .into());
        }
        let mut h = input;
        for ((w, b), spec) in self.layers.iter().zip(&self.spec.hidden) {
            let z = tape.matmul(h, params.get(*w))?;
            let z = tape.add(z, params.get(*b))?;
            h = match spec.activation {
                Activation::Tanh => tape.tanh(z),
                Activation::Relu => tape.relu(z),
                Activation::Sigmoid => tape.sigmoid(z),
            };
        }
        Ok(h)
    }

    /// Raw transformed head outputs, in head order.
    pub fn forward(&self, tape: &mut Tape, params: &Binding, input: Var) -> Result<Vec<Var>> {
        let h = self.trunk(tape, params, input)?;
        self.heads
            .iter()
            .zip(&self.spec.heads)
            .map(|((w, b), spec)| {
                let z = tape.matmul(h, params.get(*w))?;
                let z = tape.add(z, params.get(*b))?;
                Ok(match spec.transform {
                    HeadTransform::Identity => z,
                    HeadTransform::Exp => {
                        let e = tape.exp(z);
                        tape.clamp(e, STD_MIN, f64::INFINITY)
                    }
                    HeadTransform::Square => {
                        let s = tape.square(z);
                        tape.offset(s, STD_MIN * STD_MIN)
                    }
                })
            })
            .collect()
    }

    /// Interprets heads `[identity, exp | square]` as a diagonal Gaussian.
    pub fn forward_gaussian(&self, tape: &mut Tape, params: &Binding, input: Var) -> Result<DiagonalGaussian> {
        let kinds: Vec<HeadTransform> = self.spec.heads.iter().map(|h| h.transform).collect();
        let out = self.forward(tape, params, input)?;
        match kinds.as_slice() {
            [HeadTransform::Identity, HeadTransform::Exp] => DiagonalGaussian::new(tape, out[0], out[1]),
            [HeadTransform::Identity, HeadTransform::Square] => {
                DiagonalGaussian::from_variance(tape, out[0], out[1])
            }
            _ => Err(Error::Config(format!(
                "network {:?} does not have Gaussian heads: {kinds:?}",
                self.name
            ))),
        }
    }
}
