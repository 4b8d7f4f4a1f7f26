//! Named parameters, their gradients and optimizer state.
//!
//! Updates are gradient *ascent*: every objective in this crate is maximized
//! (the MI bound, the policy objective, the ELBO).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::checkpoint::{Array, Checkpoint};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum UpdateRule {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for UpdateRule {
    fn default() -> Self {
        UpdateRule::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Parameter tensors bound to one tape, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Debug, Clone)]
pub struct ParameterStore {
    params: Vec<Param>,
    names: BTreeMap<String, usize>,
    rule: UpdateRule,
    max_grad_norm: Option<f64>,
    steps: u64,
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new(UpdateRule::default())
    }
}

impl ParameterStore {
    pub fn new(rule: UpdateRule) -> Self {
        Self {
            params: Vec::new(),
            names: BTreeMap::new(),
            rule,
            max_grad_norm: None,
            steps: 0,
        }
    }

    /// Rescales the global gradient to at most `norm` before each update.
    pub fn with_max_grad_norm(mut self, norm: Option<f64>) -> Self {
        self.max_grad_norm = norm;
        self
    }

    pub fn set_max_grad_norm(&mut self, norm: Option<f64>) {
        self.max_grad_norm = norm;
    }

    pub fn rule(&self) -> UpdateRule {
        self.rule
    }

    pub fn register(&mut self, name: &str, shape: &[usize], value: Vec<f64>) -> Result<ParamId> {
        if self.names.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::Config(format!(
                "parameter {name:?}: shape {shape:?} does not match {} values",
                value.len()
            )));
        }
        let n = value.len();
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        let id = self.params.len() - 1;
        self.names.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.params[id.0].shape
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Records every parameter on `tape`; trainable leaves receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Binding> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), &p.shape, trainable))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Binding { vars })
    }

    /// Binds parameters as slices of one flat rank-1 tensor, in registration order.
    pub fn bind_flat(&self, tape: &mut Tape, flat: Var) -> Result<Binding> {
        let total = self.num_scalars();
        if tape.shape(flat) != [total] {
            return Err(Error::Validation(format!(
                "flat parameter vector has shape {:?}, expected [{total}]",
                tape.shape(flat)
            )));
        }
        let mut off = 0;
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let n = p.value.len();
            let s = tape.slice(flat, off, n)?;
            vars.push(tape.reshape(s, &p.shape)?);
            off += n;
        }
        Ok(Binding { vars })
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Validation(format!(
                "expected {} values, got {}",
                self.num_scalars(),
                flat.len()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Adds the tape gradients of the bound parameters into the stored gradients.
    pub fn accumulate_grads(&mut self, tape: &Tape, binding: &Binding) {
        for (p, &v) in self.params.iter_mut().zip(&binding.vars) {
            if let Some(g) = tape.grad_ref(v) {
                for (a, &b) in p.grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    /// Drops the accumulated gradient of one parameter, freezing it for the next step.
    pub fn clear_grad(&mut self, id: ParamId) {
        self.params[id.0].grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// One ascent step with the configured rule, then clears gradients.
    /// Returns the gradient norm before clipping. A non-finite gradient
    /// aborts without touching any parameter.
    pub fn step(&mut self, learning_rate: f64) -> Result<f64> {
        for p in &self.params {
            if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} in parameter {:?} at element {i}",
                    p.grad[i], p.name
                )));
            }
        }
        let norm = self.grad_norm();
        let scale = match self.max_grad_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.steps += 1;
        match self.rule {
            UpdateRule::Sgd => {
                for p in &mut self.params {
                    for (x, g) in p.value.iter_mut().zip(&p.grad) {
                        *x += learning_rate * scale * g;
                    }
                }
            }
            UpdateRule::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for p in &mut self.params {
                    for i in 0..p.value.len() {
                        let g = p.grad[i] * scale;
                        p.m[i] = beta1 * p.m[i] + (1.0 - beta1) * g;
                        p.v[i] = beta2 * p.v[i] + (1.0 - beta2) * g * g;
                        let mh = p.m[i] / c1;
                        let vh = p.v[i] / c2;
                        p.value[i] += learning_rate * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        self.clear_grads();
        Ok(norm)
    }

    /// Alias of [`step`](Self::step).
    pub fn sgd_step(&mut self, learning_rate: f64) -> Result<f64> {
        self.step(learning_rate)
    }

    /// Writes every parameter as `prefix + name`.
    pub fn write_into(&self, ckpt: &mut Checkpoint, prefix: &str) {
        for p in &self.params {
            ckpt.insert(
                format!("{prefix}{}", p.name),
                Array {
                    shape: p.shape.clone(),
                    data: p.value.clone(),
                },
            );
        }
    }

    /// Overwrites every parameter from `prefix + name`; all must be present with matching shapes.
    pub fn read_from(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        for p in &mut self.params {
            let key = format!("{prefix}{}", p.name);
            let arr = ckpt
                .get(&key)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks parameter {key:?}")))?;
            if arr.shape != p.shape {
                return Err(Error::Validation(format!(
                    "parameter {key:?}: checkpoint shape {:?} vs model shape {:?}",
                    arr.shape, p.shape
                )));
            }
            p.value.copy_from_slice(&arr.data);
        }
        Ok(())
    }
}
